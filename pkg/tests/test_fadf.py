import json
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from vesseldg.data import default_specs, generate_benchmark, normalize
from vesseldg.encoder import EncoderConfig
from vesseldg.fadf import (
    FrequencyPrototype,
    argmax_domain,
    compute_prototype,
    decomposer_for,
    frequency_vectors,
    fuse,
    fusion_weights,
    gap,
    infer_fused,
    load_prototypes,
    save_prototypes,
    similarities,
    similarity,
    uniform_fused,
)
from vesseldg.model import ModelConfig, ModuleFlags, SegmentationModel
from vesseldg.sdm import SpectralDomainModulator, haar_bands


def proto(low, high, k=0, n=1):
    return FrequencyPrototype(torch.tensor(low, dtype=torch.float64),
                              torch.tensor(high, dtype=torch.float64), k, n)


# ------------------------------------------------------------------ prototypes

def test_constant_low_band_gives_constant_prototype():
    def decompose(f):
        low = torch.full_like(f, 0.0) + torch.tensor([1.5, -2.0], dtype=f.dtype)[:, None, None]
        return low, f.abs()

    p = compute_prototype([torch.randn(2, 4, 4, dtype=torch.float64)], 0, decompose)
    assert torch.equal(p.low, torch.tensor([1.5, -2.0], dtype=torch.float64))
    assert p.sample_count == 1


def test_duplicate_samples_do_not_change_the_mean():
    f = torch.randn(3, 4, 4, dtype=torch.float64)
    one = compute_prototype([f], 1, haar_bands)
    two = compute_prototype([f, f.clone()], 1, haar_bands)
    assert torch.equal(one.low, two.low) and torch.equal(one.high, two.high)
    assert two.sample_count == 2


def test_matches_brute_force_loop():
    gen = torch.Generator().manual_seed(0)
    feats = [torch.randn(2, 4, 4, generator=gen, dtype=torch.float64) for _ in range(3)]
    p = compute_prototype(feats, 2, haar_bands)
    low_sum = [0.0, 0.0]
    high_sum = [0.0, 0.0]
    for f in feats:
        lo, hi = haar_bands(f[None])
        for c in range(2):
            cells_lo = lo[0, c].flatten().tolist()
            cells_hi = hi[0, c].flatten().tolist()
            low_sum[c] += sum(cells_lo) / len(cells_lo)
            high_sum[c] += sum(cells_hi) / len(cells_hi)
    assert p.low.tolist() == pytest.approx([v / 3 for v in low_sum], abs=1e-6)
    assert p.high.tolist() == pytest.approx([v / 3 for v in high_sum], abs=1e-6)


def test_prototype_is_order_invariant():
    feats = list(torch.randn(7, 4, 4, 4, dtype=torch.float64))
    a = compute_prototype(feats, 0, haar_bands, batch_size=3)
    b = compute_prototype(feats[::-1], 0, haar_bands, batch_size=2)
    assert torch.allclose(a.low, b.low, atol=1e-12) and torch.allclose(a.high, b.high, atol=1e-12)


def test_prototype_errors():
    with pytest.raises(ValueError, match="no samples"):
        compute_prototype([], 0, haar_bands)
    with pytest.raises(ValueError, match="channel mismatch"):
        compute_prototype([torch.randn(2, 4, 4), torch.randn(3, 4, 4)], 0, haar_bands)
    with pytest.raises(ValueError):
        proto([1.0, float("nan")], [1.0, 1.0])
    with pytest.raises(ValueError):
        FrequencyPrototype(torch.ones(2), torch.ones(2), 0, 0)


def test_learned_decomposer_falls_back_to_haar_per_band():
    sdm = SpectralDomainModulator(4, 2, low_branch=False)
    f = torch.randn(1, 4, 4, 4)
    low, high = decomposer_for(sdm)(f)
    assert torch.equal(low, haar_bands(f)[0])
    assert torch.equal(high, sdm.high(f))
    assert torch.equal(decomposer_for(None)(f)[1], haar_bands(f)[1])


# ------------------------------------------------------------------ similarity

def test_self_similarity_is_one():
    p = proto([1.0, 2.0, 3.0], [0.5, -1.0, 2.0])
    assert similarity(p, p) == pytest.approx(1.0, abs=1e-12)


def test_orthogonal_is_zero_and_mixed_is_half():
    a = proto([1.0, 0.0], [0.0, 1.0])
    b = proto([0.0, 1.0], [1.0, 0.0])
    assert similarity(a, b) == pytest.approx(0.0, abs=1e-12)
    c = proto([3.0, 0.0], [1.0, 0.0])
    assert similarity(a, c) == pytest.approx(0.5, abs=1e-12)


def test_zero_norm_names_the_vector():
    ok = proto([1.0, 0.0], [1.0, 0.0], k=3)
    dead = proto([0.0, 0.0], [1.0, 0.0], k=3)
    with pytest.raises(ValueError, match=r"domain\[3\]\.low"):
        similarity(ok, dead)
    with pytest.raises(ValueError, match=r"test\.low"):
        similarity(dead, ok)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_similarity_is_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    a = FrequencyPrototype(torch.randn(5, generator=g), torch.randn(5, generator=g), 0, 1)
    b = FrequencyPrototype(torch.randn(5, generator=g), torch.randn(5, generator=g), 1, 1)
    assert -1.0 <= similarity(a, b) <= 1.0


def test_batched_similarities_match_scalar():
    g = torch.Generator().manual_seed(4)
    protos = [FrequencyPrototype(torch.randn(6, generator=g), torch.randn(6, generator=g), k, 1) for k in range(3)]
    lo = torch.randn(2, 6, generator=g, dtype=torch.float64)
    hi = torch.randn(2, 6, generator=g, dtype=torch.float64)
    s = similarities(lo, hi, protos)
    for b in range(2):
        t = FrequencyPrototype(lo[b], hi[b], -1, 1)
        for k in range(3):
            assert s[b, k].item() == pytest.approx(similarity(t, protos[k]), abs=1e-12)


# ------------------------------------------------------------------ weights

@pytest.mark.parametrize("tau", [0.01, 0.5, 3.0])
def test_equal_scores_give_uniform_weights(tau):
    w = fusion_weights([0.3] * 4, tau).weights
    assert torch.allclose(w, torch.full((4,), 0.25, dtype=torch.float64), atol=1e-15)


def test_two_domain_values():
    w = fusion_weights([1.0, 0.0], 0.5).weights
    e2 = math.exp(2.0)
    assert w[0].item() == pytest.approx(e2 / (1 + e2), abs=1e-12)
    assert w.tolist() == pytest.approx([0.8808, 0.1192], abs=1e-4)


def test_low_temperature_is_nearly_one_hot():
    w = fusion_weights([1.0, 0.0], 0.01).weights
    assert w[0].item() > 1 - 1e-10
    assert w[1].item() > 0


@settings(max_examples=50, deadline=None)
@given(s=st.lists(st.floats(-1, 1), min_size=1, max_size=8),
       tau=st.sampled_from([0.01, 0.1, 0.5, 1.0]))
def test_weights_sum_to_one_and_keep_argmax(s, tau):
    w = fusion_weights(s, tau).weights
    assert abs(w.sum().item() - 1) < 1e-6
    # a ranking is only observable in float64 weights if the scores are resolvably apart
    gaps = [abs(a - b) for i, a in enumerate(s) for b in s[i + 1:]]
    if min(gaps, default=1.0) > 1e-12:
        assert int(w.argmax()) == max(range(len(s)), key=lambda i: s[i])
    if tau >= 0.1:
        assert (w > 0).all()


def test_weight_errors():
    for tau in (0.0, -0.5):
        with pytest.raises(ValueError, match="temperature"):
            fusion_weights([0.1, 0.2], tau)
    with pytest.raises(ValueError, match="finite"):
        fusion_weights([0.1, float("inf")], 0.5)
    with pytest.raises(ValueError):
        fusion_weights([], 0.5)


def test_batched_weights_rowwise():
    s = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    w = fusion_weights(s, 0.5).weights
    assert torch.allclose(w.sum(-1), torch.ones(2, dtype=torch.float64))
    assert w[1].tolist() == [0.5, 0.5]


# ------------------------------------------------------------------ fusion

def test_one_hot_selects_variant():
    vs = [torch.randn(2, 3, 3) for _ in range(3)]
    assert torch.equal(fuse(vs, torch.tensor([0.0, 0.0, 1.0])), vs[2])


def test_uniform_on_identical_variants():
    v = torch.randn(4, 2, 2, dtype=torch.float64)
    out = fuse([v, v.clone()], torch.tensor([0.5, 0.5], dtype=torch.float64))
    assert torch.allclose(out, v, atol=1e-15)


def test_fuse_matches_triple_loop():
    g = torch.Generator().manual_seed(5)
    vs = [torch.randn(2, 3, 4, generator=g, dtype=torch.float64) for _ in range(3)]
    w = [0.2, 0.3, 0.5]
    out = fuse(vs, torch.tensor(w, dtype=torch.float64))
    for c in range(2):
        for i in range(3):
            for j in range(4):
                ref = sum(w[k] * vs[k][c, i, j].item() for k in range(3))
                assert out[c, i, j].item() == pytest.approx(ref, abs=1e-6)


def test_fuse_is_linear_and_relabeling_invariant():
    g = torch.Generator().manual_seed(6)
    xs = [torch.randn(2, 3, 3, generator=g, dtype=torch.float64) for _ in range(3)]
    ys = [torch.randn(2, 3, 3, generator=g, dtype=torch.float64) for _ in range(3)]
    w = torch.tensor([0.1, 0.6, 0.3], dtype=torch.float64)
    lhs = fuse([2 * x - 3 * y for x, y in zip(xs, ys)], w)
    assert torch.allclose(lhs, 2 * fuse(xs, w) - 3 * fuse(ys, w), atol=1e-12)
    perm = [2, 0, 1]
    assert torch.allclose(fuse([xs[p] for p in perm], w[perm]), fuse(xs, w), atol=1e-12)


def test_per_sample_weights():
    vs = [torch.randn(2, 3, 2, 2) for _ in range(2)]
    w = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    out = fuse(vs, w)
    assert torch.equal(out[0], vs[0][0]) and torch.equal(out[1], vs[1][1])


def test_fuse_errors():
    with pytest.raises(ValueError, match="weights for"):
        fuse([torch.zeros(2), torch.zeros(2)], torch.tensor([1.0]))
    with pytest.raises(ValueError, match="variant shape"):
        fuse([torch.zeros(2), torch.zeros(3)], torch.tensor([0.5, 0.5]))


# ------------------------------------------------------------------ test-time inference

def _sdm_with_prototypes(k, c=8, seed=0):
    torch.manual_seed(seed)
    sdm = SpectralDomainModulator(c, k)
    protos = [compute_prototype(torch.randn(3, c, 4, 4), i, decomposer_for(sdm)) for i in range(k)]
    return sdm, protos


def test_single_domain_weight_is_one():
    sdm, protos = _sdm_with_prototypes(1)
    f = torch.randn(2, 8, 4, 4)
    fused, w = infer_fused(f, protos, sdm, 0.5)
    assert torch.equal(w.weights, torch.ones(2, 1, dtype=torch.float64))
    assert torch.allclose(fused, sdm(f, 0), atol=1e-6)


def test_missing_prototype_rejected():
    sdm, protos = _sdm_with_prototypes(3)
    with pytest.raises(ValueError, match="prototypes cover"):
        infer_fused(torch.randn(1, 8, 4, 4), protos[:2], sdm, 0.5)


def test_infer_fused_is_weighted_sum_of_variants():
    sdm, protos = _sdm_with_prototypes(3)
    f = torch.randn(2, 8, 4, 4)
    fused, w = infer_fused(f, protos, sdm, 0.5)
    variants = [sdm(f, k) for k in range(3)]
    ref = sum(w.weights[:, k].float()[:, None, None, None] * variants[k] for k in range(3))
    assert torch.allclose(fused, ref, atol=1e-6)
    assert torch.allclose(uniform_fused(f, sdm), sum(variants) / 3, atol=1e-6)


def test_model_fusion_route_matches_literal_fusion():
    model = SegmentationModel(ModelConfig(encoder=EncoderConfig(channels=16), num_domains=3))
    model.eval()
    with torch.no_grad():
        for tok in model.sdm.token:
            tok.t.normal_()
    feats = torch.randn(6, 16, 4, 4)
    protos = [compute_prototype(feats[2 * k:2 * k + 2], k, decomposer_for(model.sdm)) for k in range(3)]
    model.set_prototypes(protos)
    f = torch.randn(2, 16, 4, 4)
    with torch.no_grad():
        literal, _ = infer_fused(f, protos, model.sdm, model.config.tau)
        offset = model.modulate(f)
    assert torch.allclose(offset, literal, atol=1e-5)


def test_fadf_disabled_uses_true_token_or_uniform_average():
    flags = ModuleFlags(sdm=True, fadf=False, hmpr=False)
    model = SegmentationModel(ModelConfig(encoder=EncoderConfig(channels=16), num_domains=3, flags=flags)).eval()
    f = torch.randn(2, 16, 4, 4)
    with torch.no_grad():
        assert torch.equal(model.modulate(f, torch.tensor([1, 1])), model.sdm(f, 1))
        assert torch.allclose(model.modulate(f, None), uniform_fused(f, model.sdm), atol=1e-6)


def test_fadf_enabled_without_prototypes_is_an_error():
    model = SegmentationModel(ModelConfig(encoder=EncoderConfig(channels=16), num_domains=2)).eval()
    with pytest.raises(RuntimeError, match="no frequency prototypes"):
        model(torch.rand(1, 3, 64, 64))


def test_benchmark_domains_are_separable():
    # desk geometry: 20 training images per domain, 128 px, C = 64
    bench = generate_benchmark(default_specs(), 20, 5, seed=0, size=128)
    enc = EncoderConfig(channels=64, seed=0)
    model = SegmentationModel(ModelConfig(encoder=enc, num_domains=4, seed=0)).eval()
    decompose = decomposer_for(model.sdm)

    def feats(ds):
        with torch.no_grad():
            return model.encoder(torch.stack([normalize(im, (0.5,) * 3, (0.25,) * 3) for im in ds.images]))

    protos = [compute_prototype(feats(bench[k]["train"]), k, decompose) for k in range(4)]
    sims = torch.zeros(4, 4, dtype=torch.float64)
    for k in range(4):
        lo, hi = frequency_vectors(feats(bench[k]["train"]), decompose)
        w = fusion_weights(similarities(lo, hi, protos), 0.5)
        if k == 2:
            assert (argmax_domain(w) == 2).all()
        lo, hi = frequency_vectors(feats(bench[k]["test"]), decompose)
        s = similarities(lo, hi, protos)
        assert (s.argmax(-1) == k).all()
        sims[k] = s.mean(0)
    within = sims.diagonal().mean()
    cross = (sims.sum() - sims.diagonal().sum()) / 12
    assert within > cross


# ------------------------------------------------------------------ store

def test_store_round_trip(tmp_path):
    g = torch.Generator().manual_seed(9)
    protos = [FrequencyPrototype(torch.randn(16, generator=g, dtype=torch.float64),
                                 torch.randn(16, generator=g, dtype=torch.float64), k, 5 + k) for k in range(3)]
    path = save_prototypes(tmp_path / "p.json", protos)
    data = json.loads(path.read_text())
    assert data["version"] == 1 and data["C"] == 16 and data["K"] == 3
    assert [d["domain_id"] for d in data["domains"]] == [0, 1, 2]
    back = load_prototypes(path)
    for a, b in zip(protos, back):
        assert torch.equal(a.low, b.low) and torch.equal(a.high, b.high)
        assert a.sample_count == b.sample_count
    first = path.read_bytes()
    save_prototypes(path, protos[::-1])
    assert path.read_bytes() == first


def test_store_header_is_validated(tmp_path):
    protos = [FrequencyPrototype(torch.ones(4), torch.ones(4), 0, 1)]
    path = save_prototypes(tmp_path / "p.json", protos)
    data = json.loads(path.read_text())
    data["K"] = 2
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="inconsistent"):
        load_prototypes(path)
    data["version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(ValueError, match="version"):
        load_prototypes(path)


def test_gap_is_spatial_mean():
    x = torch.arange(24.0).reshape(2, 3, 4)
    assert torch.equal(gap(x), x.mean(dim=(-2, -1)))
