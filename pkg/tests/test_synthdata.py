import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amdnet.evalkit import mv_bin
from amdnet.synthdata import (
    CorpusManifest,
    MagicError,
    ManifestError,
    NonFiniteError,
    SpecError,
    SyntheticCorpusSpec,
    TruncatedError,
    VersionError,
    corpus_from_generated,
    decode_features,
    encode_features,
    generate_corpus,
    load_corpus,
    load_feature_file,
    test_split_spec,
    write_feature_file,
)

SMALL = SyntheticCorpusSpec(num_videos=12, N=8, D_in=16, seed=3)


class TestFeatureFile:
    def test_hand_encoded_payload(self, tmp_path):
        write_feature_file(tmp_path / "x.prvf", np.array([[1.0, 2.0]]))
        blob = (tmp_path / "x.prvf").read_bytes()
        assert blob[:4] == b"PRVF"
        assert struct.unpack("<HII", blob[4:14]) == (1, 1, 2)
        assert blob[14:].hex() == "0000803f00000040"

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6, width=32)))
    def test_round_trip_bitwise(self, x):
        blob = encode_features(x)
        assert len(blob) == 14 + 4 * x.size
        y = decode_features(blob)
        assert y.dtype == np.float32 and y.tobytes() == x.tobytes()

    def test_file_round_trip(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
        write_feature_file(tmp_path / "a.prvf", x)
        assert (tmp_path / "a.prvf").stat().st_size == 14 + 4 * 15
        assert np.array_equal(load_feature_file(tmp_path / "a.prvf"), x)

    def test_bad_magic(self):
        with pytest.raises(MagicError):
            decode_features(b"XXXX" + encode_features(np.ones((1, 1)))[4:])

    def test_bad_version(self):
        blob = bytearray(encode_features(np.ones((1, 1))))
        blob[4:6] = struct.pack("<H", 2)
        with pytest.raises(VersionError):
            decode_features(bytes(blob))

    def test_size_disagreement(self):
        blob = encode_features(np.ones((3, 2)))
        with pytest.raises(TruncatedError):
            decode_features(blob[:-4])
        with pytest.raises(TruncatedError):
            decode_features(blob + b"\0\0\0\0")
        with pytest.raises(TruncatedError):
            decode_features(blob[:10])

    def test_nan_rejected(self):
        with pytest.raises(NonFiniteError):
            decode_features(encode_features(np.array([[1.0, np.nan]])))

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(OSError, match="nope.prvf"):
            load_feature_file(tmp_path / "nope.prvf")

    def test_rejects_non_matrix(self, tmp_path):
        with pytest.raises(ValueError):
            write_feature_file(tmp_path / "b.prvf", np.ones(3))


@pytest.fixture(scope="module")
def gen():
    return generate_corpus(SMALL)


class TestGenerator:
    def test_counts(self, gen):
        m = gen.manifest
        assert len(m.videos) == 12
        assert len(m.moments) == 12 * 3
        assert len(m.queries) == 12 * 3 * 2
        assert gen.query_features.shape == (72, 16)
        assert all(f.shape == (8 * 3, 16) for f in gen.video_features.values())

    def test_spans_valid_and_not_nested(self, gen):
        for v in gen.manifest.videos:
            spans = sorted(m.span for m in v.moments)
            assert all(0 <= s < e <= 1 for s, e in spans)
            for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                assert s1 < s2 and e1 < e2
            assert spans[0][0] == 0.0 and spans[-1][1] == 1.0

    def test_every_mv_bin_populated_per_video(self, gen):
        for v in gen.manifest.videos:
            assert sorted(mv_bin(m.length) for m in v.moments) == [0, 1, 2]

    def test_query_latents_closer_to_own_moment(self, gen):
        # pull queries back into latent space through the text map
        lat = gen.query_features @ np.linalg.pinv(gen.world.text_map)
        keys = list(gen.moment_latents)
        bank = np.stack([gen.moment_latents[k] for k in keys])
        bank /= np.linalg.norm(bank, axis=1, keepdims=True)
        lat /= np.linalg.norm(lat, axis=1, keepdims=True)
        sims = lat @ bank.T
        own = np.array([keys.index(q.moment_id) for q in gen.manifest.queries])
        mask = np.ones_like(sims, dtype=bool)
        mask[np.arange(len(own)), own] = False
        margin = sims[np.arange(len(own)), own].mean() - sims[mask].mean()
        assert margin > 0.5

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        generate_corpus(SMALL, a)
        generate_corpus(SMALL, b)
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files and files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_seed_changes_output(self):
        a = generate_corpus(SMALL)
        b = generate_corpus(SyntheticCorpusSpec(num_videos=12, N=8, D_in=16, seed=4))
        assert not np.array_equal(a.query_features, b.query_features)

    def test_test_split_shares_world(self):
        spec = test_split_spec(SMALL)
        assert spec.seed != SMALL.seed
        a, b = generate_corpus(SMALL), generate_corpus(spec)
        assert np.array_equal(a.world.text_map, b.world.text_map)
        assert not np.array_equal(a.query_features, b.query_features)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(moments_per_video=13),
            dict(moments_per_video=0),
            dict(noise_std=-1.0),
            dict(min_width=0.05, transition=0.05),
        ],
    )
    def test_infeasible_specs(self, kw):
        with pytest.raises(SpecError):
            SyntheticCorpusSpec(**kw)

    @pytest.mark.parametrize("m", [1, 2, 4])
    def test_other_moment_counts(self, m):
        gen = generate_corpus(SyntheticCorpusSpec(num_videos=3, moments_per_video=m, N=8, D_in=8))
        assert all(len(v.moments) == m for v in gen.manifest.videos)


class TestManifest:
    def test_disk_round_trip(self, tmp_path):
        gen = generate_corpus(SMALL, tmp_path)
        back = CorpusManifest.read(tmp_path)
        assert back.records() == gen.manifest.records()
        a = load_corpus(tmp_path, 8)
        b = corpus_from_generated(gen, 8)
        assert a.video_ids == b.video_ids and a.query_ids == b.query_ids
        assert np.array_equal(a.clips, b.clips) and np.array_equal(a.query_feats, b.query_feats)
        assert np.array_equal(a.query_video, b.query_video)

    def test_unknown_video_rejected(self, tmp_path):
        generate_corpus(SMALL, tmp_path)
        path = tmp_path / "manifest.jsonl"
        lines = path.read_text().splitlines()
        lines.append('{"type": "query", "query_id": "zz", "video_id": "nope", "feature_path": "queries.prvf", "row": 0}')
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ManifestError, match="unknown video"):
            CorpusManifest.read(tmp_path)

    def test_missing_feature_file(self, tmp_path):
        generate_corpus(SMALL, tmp_path)
        (tmp_path / "videos" / "v00.prvf").unlink()
        with pytest.raises(ManifestError, match="missing"):
            CorpusManifest.read(tmp_path)

    def test_malformed_line(self, tmp_path):
        (tmp_path / "manifest.jsonl").write_text('{"type": "video"}\n')
        with pytest.raises(ManifestError):
            CorpusManifest.read(tmp_path)

    def test_subset(self):
        corpus = corpus_from_generated(generate_corpus(SMALL), 8)
        sub = corpus.subset([2, 5])
        assert sub.video_ids == [corpus.video_ids[2], corpus.video_ids[5]]
        assert len(sub.query_ids) == 12 and set(sub.query_video.tolist()) == {0, 1}
