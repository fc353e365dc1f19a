import json

import numpy as np
import pytest

from rss_atlas import autoencoder as ae
from rss_atlas import experiment as ex
from rss_atlas import gp_map, localization as loc, pca
from rss_atlas.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def train_norm(small_survey_normalized):
    return small_survey_normalized[0]


class TestConfigParsing:
    def test_minimal_synth_config(self):
        cfg = ex.config_from_dict(
            {"seed": 1, "output_dir": "out", "dataset": {"synth": {"n_aps": 5}}}
        )
        assert cfg.synth.n_aps == 5
        assert len(cfg.gp_grid) == 45  # default 5 x 3 x 3 grid

    def test_area_without_waypoints_gets_serpentine(self):
        cfg = ex.config_from_dict(
            {"seed": 1, "output_dir": "o", "dataset": {"synth": {"area": [100, 60]}}}
        )
        assert len(cfg.synth.waypoints) >= 4

    def test_both_sources_rejected(self):
        with pytest.raises(ConfigError):
            ex.config_from_dict(
                {"seed": 1, "output_dir": "o",
                 "dataset": {"synth": {}, "csv": "x.csv"}}
            )

    def test_no_source_rejected(self):
        with pytest.raises(ConfigError):
            ex.config_from_dict({"seed": 1, "output_dir": "o", "dataset": {}})

    def test_unknown_compressor_kind(self):
        with pytest.raises(ConfigError):
            ex.config_from_dict(
                {"seed": 1, "output_dir": "o", "dataset": {"synth": {}},
                 "compressors": [{"kind": "umap"}]}
            )

    def test_unknown_synth_field(self):
        with pytest.raises(ConfigError, match="unknown synth"):
            ex.config_from_dict(
                {"seed": 1, "output_dir": "o", "dataset": {"synth": {"n_access": 3}}}
            )

    def test_malformed_values_become_config_errors(self):
        with pytest.raises(ConfigError):
            ex.config_from_dict(
                {"seed": 1, "output_dir": "o", "dataset": {"synth": {}},
                 "gp_grid": {"length_scales": [5]}}
            )

    def test_missing_seed(self):
        with pytest.raises(ConfigError, match="seed"):
            ex.config_from_dict({"output_dir": "o", "dataset": {"synth": {}}})


class TestCompareSpecs:
    def test_standard_five_labels(self):
        cfg = ex.config_from_dict(
            {"seed": 4, "output_dir": "o", "dataset": {"synth": {}}}
        )
        specs = ex.default_compare_compressors(cfg)
        assert [s.resolved_label() for s in specs] == [
            "input", "pca30", "pca10", "sparse_ae", "distance_ae",
        ]
        sparse = specs[3].train
        assert sparse.lambda_d == 0.0
        assert specs[4].train.lambda_d == cfg.ae_train.lambda_d


class TestPipelineSerialization:
    @pytest.mark.parametrize("kind", ["identity", "pca", "autoencoder"])
    def test_roundtrip(self, kind, train_norm):
        if kind == "identity":
            comp = loc.IdentityCompressor(train_norm.m)
        elif kind == "pca":
            comp = loc.PcaCompressor(pca.fit(train_norm.Z, 4))
        else:
            cfg = ae.TrainConfig(latent_dim=4, hidden_dim=8, epochs=3, batch_size=16, seed=2)
            params, _ = ae.train(train_norm, cfg)
            comp = loc.AutoencoderCompressor(params)
        grid = [gp_map.GpHyperparams(1.0, 10.0, 0.05)]
        pipe = ex.build_pipeline("p", comp, train_norm, grid)
        back = ex.pipeline_from_dict(ex.pipeline_to_dict(pipe))
        z = train_norm.Z[:3]
        # Stored values are bit-exact; encode may differ by an ulp because
        # reloaded arrays can take a different BLAS path.
        np.testing.assert_allclose(back.encode(z), pipe.encode(z), rtol=1e-12, atol=1e-14)
        assert np.array_equal(back.gp.W, pipe.gp.W)
        assert np.array_equal(back.latent_mean, pipe.latent_mean)
        assert np.array_equal(back.latent_std, pipe.latent_std)

    def test_version_check(self):
        with pytest.raises(DataError, match="format_version"):
            ex.pipeline_from_dict({"format_version": 0})


class TestAtomicWrite:
    def test_missing_directory_leaves_nothing(self, tmp_path):
        target = tmp_path / "no" / "such" / "file.txt"
        with pytest.raises(DataError):
            ex.atomic_write_text(str(target), "data")
        assert not target.parent.exists()

    def test_write_then_replace(self, tmp_path):
        target = tmp_path / "f.txt"
        ex.atomic_write_text(str(target), "one")
        ex.atomic_write_text(str(target), "two")
        assert target.read_text() == "two"
        assert not (tmp_path / "f.txt.tmp").exists()


class TestManifest:
    def test_contents(self, tmp_path):
        cfg = ex.config_from_dict(
            {"seed": 2, "output_dir": str(tmp_path), "dataset": {"synth": {}}}
        )
        manifest = ex.Manifest(cfg)
        manifest.stage("one")
        manifest.artifact(str(tmp_path / "a.csv"))
        manifest.write(str(tmp_path))
        doc = json.loads((tmp_path / "manifest.json").read_text())
        assert doc["seed"] == 2
        assert doc["artifacts"] == ["a.csv"]
        assert "one" in doc["stage_seconds"]
        assert len(doc["config_hash"]) == 64

    def test_hash_stable_for_equal_config(self):
        doc = {"seed": 2, "output_dir": "o", "dataset": {"synth": {}}}
        a = ex.config_hash(ex.config_from_dict(doc))
        b = ex.config_hash(ex.config_from_dict(json.loads(json.dumps(doc))))
        assert a == b


class TestBuildPipeline:
    def test_latent_standardization(self, train_norm):
        comp = loc.PcaCompressor(pca.fit(train_norm.Z, 3))
        pipe = ex.build_pipeline("p", comp, train_norm, [gp_map.GpHyperparams(1.0, 10.0, 0.05)])
        latents = pipe.encode(train_norm.Z)
        assert np.abs(latents.mean(axis=0)).max() < 1e-9
        assert np.abs(latents.std(axis=0) - 1.0).max() < 1e-9

    def test_pca_dim_clipped_to_ap_count(self, train_norm):
        spec = ex.CompressorSpec(kind="pca", latent_dim=500)
        cfg = ex.config_from_dict(
            {"seed": 0, "output_dir": "o", "dataset": {"synth": {}}}
        )
        comp, _ = ex.build_compressor(spec, train_norm, cfg)
        assert comp.latent_dim == train_norm.m
