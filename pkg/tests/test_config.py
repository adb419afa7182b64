import numpy as np
import pytest

from fmrt.config import SECTIONS, ConfigError, RunConfig, load_config, parse_ini, to_ini


class TestDefaults:
    def test_reference_values(self):
        cfg = RunConfig()
        assert (cfg.rho, cfg.beta, cfg.window, cfg.l1, cfg.l2) == (0.2, 0.2, 5, 4, 2)
        assert (cfg.coarse_dim, cfg.fine_dim, cfg.gamma) == (256, 128, 8.0)
        assert cfg.dw_kernels == (3, 5) and cfg.encoder == "awpe"

    def test_desk_preset(self):
        cfg = RunConfig.desk()
        assert (cfg.coarse_dim, cfg.fine_dim, cfg.l1, cfg.l2) == (32, 16, 2, 1)
        assert cfg.rho == RunConfig().rho
        assert RunConfig.desk(beta=0.5).beta == 0.5

    def test_every_field_has_a_section(self):
        keys = [k for ks in SECTIONS.values() for k in ks]
        assert sorted(keys) == sorted(RunConfig().to_dict())


class TestIni:
    def test_parse_overrides(self):
        cfg = parse_ini("[model]\ndw_kernels = 3, 7\nencoder = sinusoidal\n[loss]\nbeta = 0.5\n[matching]\nnormalize_features = yes\n")
        assert cfg.dw_kernels == (3, 7) and cfg.encoder == "sinusoidal"
        assert cfg.beta == 0.5 and cfg.normalize_features is True
        assert cfg.rho == 0.2

    def test_base_is_kept(self):
        cfg = parse_ini("[train]\nsteps = 50\n", RunConfig.desk())
        assert cfg.steps == 50 and cfg.coarse_dim == 32

    @pytest.mark.parametrize("cfg", [RunConfig(), RunConfig.desk(encoder="sinusoidal", dw_kernels=(5, 7), beta=0.1)])
    def test_round_trip(self, cfg):
        assert parse_ini(to_ini(cfg)) == cfg

    def test_load_file(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[data]\nseed = 3\n")
        assert load_config(str(path)).seed == 3

    @pytest.mark.parametrize(
        "text,match",
        [
            ("[optimizer]\nlr = 1\n", "section"),
            ("[model]\nheads = 8\n", "key"),
            ("[model]\ncoarse_dim = big\n", "bad value"),
            ("[matching]\nnormalize_features = maybe\n", "bad value"),
            ("coarse_dim = 3\n", "malformed"),
        ],
    )
    def test_rejects(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_ini(text)


class TestValidation:
    @pytest.mark.parametrize(
        "changes",
        [
            dict(coarse_dim=7),
            dict(encoder="rope"),
            dict(dw_kernels=(3, 4)),
            dict(window=4),
            dict(rho=1.0),
            dict(rho=0.0),
            dict(tau=0.0),
            dict(beta=-0.1),
            dict(image_size=50),
            dict(loss_denominator="mean"),
            dict(encoder="sinusoidal", coarse_dim=30),
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            RunConfig.desk(**changes)

    def test_from_dict_unknown(self):
        with pytest.raises(ConfigError, match="unknown"):
            RunConfig.from_dict({"heads": 8})

    def test_tuples_normalized(self):
        cfg = RunConfig.desk(dw_kernels=np.array([5, 7]))
        assert cfg.dw_kernels == (5, 7) and isinstance(cfg.dw_kernels[0], int)
