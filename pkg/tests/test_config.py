import pytest

from adspeech.config import (ConfigError, DEFAULTS, apply_overrides,
                             canonical_json, config_digest, load_config,
                             load_preset, parse_override, preset_names,
                             read_snapshot, write_snapshot)


class TestLoading:
    def test_defaults_load_without_file(self):
        cfg = load_config()
        assert cfg == DEFAULTS
        assert cfg is not DEFAULTS

    def test_toml_file_patches_defaults(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[experiment]\nname = 'trial'\n[asr]\nepochs = 5\n")
        cfg = load_config(p)
        assert cfg["experiment"]["name"] == "trial"
        assert cfg["asr"]["epochs"] == 5
        assert cfg["asr"]["lr"] == DEFAULTS["asr"]["lr"]

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.toml")

    def test_malformed_toml_rejected(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[experiment\nname=")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError, match="mystery"):
            load_config(p)

    def test_unknown_nested_key_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[asr]\nepoch = 5\n")  # typo: 'epoch'
        with pytest.raises(ConfigError, match="asr.epoch"):
            load_config(p)

    def test_type_mismatch_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[asr]\nepochs = 'many'\n")
        with pytest.raises(ConfigError, match="asr.epochs"):
            load_config(p)

    def test_int_accepted_where_float_expected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[split]\ntrain_ratio = 1\n")
        assert load_config(p)["split"]["train_ratio"] == 1

    def test_bool_not_accepted_as_int(self):
        with pytest.raises(ConfigError):
            apply_overrides(load_config(), ["asr.epochs=true"])


class TestOverrides:
    def test_parse_types(self):
        assert parse_override("asr.epochs=5") == (["asr", "epochs"], 5)
        assert parse_override("asr.lr=0.001") == (["asr", "lr"], 0.001)
        assert parse_override("split.allow_dev_overlap=false") == (
            ["split", "allow_dev_overlap"], False)
        keys, val = parse_override("experiment.name=trial")
        assert keys == ["experiment", "name"] and val == "trial"

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_override("asr.epochs")

    def test_empty_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_override("=5")

    def test_apply_and_validate(self):
        cfg = apply_overrides(load_config(), ["ssl.dim=32", "data.language=b"])
        assert cfg["ssl"]["dim"] == 32
        assert cfg["data"]["language"] == "b"

    def test_unknown_override_key_rejected(self):
        with pytest.raises(ConfigError):
            apply_overrides(load_config(), ["ssl.width=32"])


class TestDigest:
    def test_stable_under_key_reordering(self, tmp_path):
        a = tmp_path / "a.toml"
        b = tmp_path / "b.toml"
        a.write_text("[asr]\nepochs = 5\nlr = 0.002\n[experiment]\nname = 'x'\n")
        b.write_text("[experiment]\nname = 'x'\n[asr]\nlr = 0.002\nepochs = 5\n")
        assert config_digest(load_config(a)) == config_digest(load_config(b))

    def test_changes_when_value_changes(self):
        base = load_config()
        other = apply_overrides(base, ["asr.epochs=5"])
        assert config_digest(base) != config_digest(other)

    def test_canonical_json_is_sorted_and_compact(self):
        text = canonical_json({"b": 1, "a": {"d": 2, "c": 3}})
        assert text == '{"a":{"c":3,"d":2},"b":1}'

    def test_digest_is_sha256_hex(self):
        d = config_digest(load_config())
        assert len(d) == 64
        int(d, 16)


class TestSnapshots:
    def test_round_trip_preserves_digest(self, tmp_path):
        cfg = apply_overrides(load_config(), ["experiment.seed=7"])
        path = tmp_path / "config.json"
        write_snapshot(cfg, path)
        loaded = read_snapshot(path)
        assert loaded == cfg
        assert config_digest(loaded) == config_digest(cfg)

    def test_snapshot_validation(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text('{"mystery": 1}')
        with pytest.raises(ConfigError):
            read_snapshot(path)


class TestPresets:
    def test_expected_presets_present(self):
        names = preset_names()
        for want in ("ctc-attn", "svm-minlld", "wav2vec-3-2", "wav2vec-6-5",
                     "wav2vec-10-5", "wav2vec-15-5", "wav2vec-last3"):
            assert want in names

    def test_all_presets_validate(self):
        for name in preset_names():
            cfg = load_preset(name)
            assert config_digest(cfg)

    def test_unknown_preset_rejected(self):
        with pytest.raises(ConfigError):
            load_preset("nope")

    def test_preset_accepts_overrides(self):
        cfg = load_preset("ctc-attn", ["experiment.seed=3"])
        assert cfg["experiment"]["seed"] == 3
        assert cfg["finetune"]["encoder"] == "ctc_attn"
