import numpy as np
import pytest
from dataclasses import replace

from phonotok.errors import ConfigError, DataError
from phonotok.synthgen import (GenConfig, SyntheticSpeech, collapse_repeats, gen_dataset, gen_utterance,
                               oracle_speaker_embedding, read_dataset, read_header, split_sizes,
                               write_dataset)

# chi-square with 11 degrees of freedom: mean 11, sd sqrt(22); 3-sigma bound
CHI2_DF11_3SIGMA = 11 + 3 * np.sqrt(22)


def test_same_seed_same_utterance(gen_cfg):
    a = gen_utterance(gen_cfg, np.random.default_rng(7), speaker_id=3)
    b = gen_utterance(gen_cfg, np.random.default_rng(7), speaker_id=3)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.factors.prosody_contour, b.factors.prosody_contour)


def test_noise_free_render_is_deterministic(gen_cfg):
    speech = SyntheticSpeech(replace(gen_cfg, noise_sigma=0.0))
    f = speech.sample_factors(np.random.default_rng(0), 1)
    assert np.array_equal(speech.render(f, np.random.default_rng(1)), speech.render(f, np.random.default_rng(2)))


def test_factor_invariants(gen_cfg):
    speech = SyntheticSpeech(gen_cfg)
    for i in range(300):
        seq = speech.utterance(np.random.default_rng(i), i % gen_cfg.s, f"u{i}")
        f = seq.factors
        assert collapse_repeats(f.frame_labels) == f.content_labels.tolist()
        assert gen_cfg.min_frames <= seq.n_frames <= gen_cfg.max_frames
        assert len(f.frame_labels) == len(f.prosody_contour) == seq.n_frames
        assert np.all(np.abs(f.prosody_contour) <= 1.0)
        assert np.max(np.abs(np.diff(f.prosody_contour))) <= gen_cfg.prosody_smoothness + 1e-15
        runs = np.diff(np.flatnonzero(np.diff(np.r_[-1, f.frame_labels, -1])))
        assert runs.min() >= gen_cfg.min_duration


def test_mixing_blocks_are_orthogonal(gen_cfg):
    s = SyntheticSpeech(gen_cfg)
    blocks = np.hstack([s.content_mix, s.prosody_mix, s.speaker_mix])
    assert np.allclose(blocks.T @ blocks, np.eye(blocks.shape[1]), atol=1e-12)


def test_split_sizes_and_speaker_disjointness(gen_cfg):
    assert split_sizes(100, (0.8, 0.1, 0.1)) == (80, 10, 10)
    ds = gen_dataset(gen_cfg, 100)
    assert (len(ds.train), len(ds.dev), len(ds.test)) == (80, 10, 10)
    train_spk = {s.factors.speaker_id for s in ds.train}
    test_spk = {s.factors.speaker_id for s in ds.test}
    assert train_spk.isdisjoint(test_spk)
    with pytest.raises(ConfigError):
        split_sizes(10, (0.5, 0.2, 0.2))


def test_too_few_speakers_for_disjoint_split(gen_cfg):
    with pytest.raises(ConfigError):
        gen_dataset(replace(gen_cfg, s=2, heldout_speakers=2), 20)


def test_oracle_speaker_embedding(gen_cfg):
    e = oracle_speaker_embedding(3, gen_cfg)
    assert np.array_equal(e, oracle_speaker_embedding(3, gen_cfg))
    assert e.shape == (gen_cfg.d_s,)
    vecs = [oracle_speaker_embedding(i, gen_cfg) for i in range(gen_cfg.s)]
    assert len({v.tobytes() for v in vecs}) == gen_cfg.s
    with pytest.raises(KeyError):
        oracle_speaker_embedding(gen_cfg.s, gen_cfg)


def test_speaker_vector_constant_per_speaker(small_dataset):
    seen = {}
    for s in small_dataset.train + small_dataset.dev + small_dataset.test:
        v = seen.setdefault(s.factors.speaker_id, s.factors.speaker_vector)
        assert np.array_equal(v, s.factors.speaker_vector)


def test_content_distribution_uniform_and_prosody_independent(gen_cfg):
    speech = SyntheticSpeech(gen_cfg)
    labels, frame_labels, contour, spk = [], [], [], []
    for i in range(10_000):
        f = speech.sample_factors(np.random.default_rng([99, i]), i % gen_cfg.s)
        labels.append(f.content_labels)
        if len(contour) < 300:
            frame_labels.append(f.frame_labels)
            contour.append(f.prosody_contour)
            spk.append(np.full(len(f.prosody_contour), f.speaker_id))
    counts = np.bincount(np.concatenate(labels), minlength=gen_cfg.v_c)
    expected = counts.sum() / gen_cfg.v_c
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_DF11_3SIGMA
    c = np.concatenate(contour)[:10_000]
    assert len(c) == 10_000
    onehot = np.eye(gen_cfg.v_c)[np.concatenate(frame_labels)[:10_000]]
    assert np.max(np.abs([np.corrcoef(c, onehot[:, j])[0, 1] for j in range(gen_cfg.v_c)])) < 0.1
    assert abs(np.corrcoef(c, np.concatenate(spk)[:10_000])[0, 1]) < 0.1


def test_dataset_file_roundtrip(tmp_path, gen_cfg):
    ds = gen_dataset(gen_cfg, 20)
    write_dataset(tmp_path / "a", ds, "test-1")
    write_dataset(tmp_path / "b", gen_dataset(gen_cfg, 20), "test-1")
    for name in ("train", "dev", "test"):
        assert (tmp_path / "a" / f"{name}.phtk").read_bytes() == (tmp_path / "b" / f"{name}.phtk").read_bytes()
    back = read_dataset(tmp_path / "a", gen_cfg)
    for s, r in zip(ds.train, back.train):
        assert np.array_equal(s.features, r.features)
        assert np.array_equal(s.factors.content_labels, r.factors.content_labels)
        assert np.allclose(s.factors.prosody_contour, r.factors.prosody_contour, atol=5e-7, rtol=0)
        assert s.factors.speaker_id == r.factors.speaker_id and s.utterance_id == r.utterance_id
    hdr = read_header(tmp_path / "a" / "train.phtk")
    assert hdr["records"] == "16" and hdr["config_hash"] == gen_cfg.config_hash()


def test_record_field_order(tmp_path, gen_cfg):
    write_dataset(tmp_path, gen_dataset(gen_cfg, 10), "t")
    lines = (tmp_path / "dev.phtk").read_text().splitlines()
    keys = [ln.split(" ", 1)[0] for ln in lines[1:9]]
    assert keys == ["version", "utterance_id", "speaker_id", "L", "content_labels", "T", "prosody_contour",
                    "features"]
    decimals = lines[7].split()[1:]
    assert all(len(v.split(".")[1]) == 6 for v in decimals)


def test_read_dataset_rejects_other_config(tmp_path, gen_cfg):
    write_dataset(tmp_path, gen_dataset(gen_cfg, 10), "t")
    with pytest.raises(DataError, match="generated with config"):
        read_dataset(tmp_path, replace(gen_cfg, noise_sigma=0.2))


def test_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(noise_sigma=-1).validate()
    with pytest.raises(ConfigError):
        GenConfig(min_duration=0).validate()
    with pytest.raises(ConfigError):
        GenConfig(d=10).validate()
