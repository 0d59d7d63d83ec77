"""End-to-end checks of the python surface against a tiny random model."""

import json

import numpy as np
import pytest

import clipdecomp as cd


def make_toy_model(path, rng, layers=2, heads=2, width=8, out_dim=6, patch=2, image=4):
    d = width
    tokens = (image // patch) ** 2 + 1
    s = 1.0 / np.sqrt(d)

    def w(*shape):
        return (rng.standard_normal(shape) * s).astype(np.float32)

    entries = {
        "patch_embed.weight": w(d, 3 * patch * patch),
        "patch_embed.bias": w(d),
        "cls_token": w(d),
        "pos_embed": w(tokens, d),
        "ln_final.weight": (1.0 + 0.1 * rng.standard_normal(d)).astype(np.float32),
        "ln_final.bias": w(d),
        "proj": w(out_dim, d),
    }
    for i in range(layers):
        p = f"layers.{i}."
        entries[p + "ln1.weight"] = (1.0 + 0.1 * rng.standard_normal(d)).astype(np.float32)
        entries[p + "ln1.bias"] = w(d)
        entries[p + "qkv.weight"] = w(3 * d, d)
        entries[p + "qkv.bias"] = w(3 * d)
        entries[p + "attn_out.weight"] = w(d, d)
        entries[p + "attn_out.bias"] = w(d)
        entries[p + "ln2.weight"] = (1.0 + 0.1 * rng.standard_normal(d)).astype(np.float32)
        entries[p + "ln2.bias"] = w(d)
        entries[p + "mlp_up.weight"] = w(4 * d, d)
        entries[p + "mlp_up.bias"] = w(4 * d)
        entries[p + "mlp_down.weight"] = w(d, 4 * d)
        entries[p + "mlp_down.bias"] = w(d)

    cd.save_archive(str(path), entries)
    sidecar = {"num_heads": heads, "patch_size": patch, "image_size": [image, image], "ln_eps": 1e-5}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))
    return cd.load_model(str(path))


@pytest.fixture
def toy(tmp_path):
    rng = np.random.default_rng(7)
    model = make_toy_model(tmp_path / "model.nta", rng)
    return model, rng


def test_decompose_matches_reference(toy):
    model, rng = toy
    pixels = rng.standard_normal((3, 4, 4)).astype(np.float32)
    ref = cd.reference_forward(model, pixels)
    d = cd.decompose_image(model, pixels, "img0")
    rec = cd.reconstruct(d)
    rel = np.abs(rec - ref).max() / max(np.abs(ref).max(), 1e-12)
    assert rel <= 1e-4
    assert d.image_id == "img0"
    assert d.msa_terms.shape == (5, 2, 2, 6)


def test_regrouping_identities(toy):
    model, rng = toy
    pixels = rng.standard_normal((3, 4, 4)).astype(np.float32)
    d = cd.decompose_image(model, pixels)
    msa_sum = d.msa_terms.sum(axis=(0, 1, 2))
    token_sum = sum(cd.token_contribution(d, i) for i in range(d.num_tokens))
    head_sum = sum(
        cd.head_contribution(d, l, h) for l in range(d.num_layers) for h in range(d.num_heads)
    )
    np.testing.assert_allclose(token_sum, msa_sum, atol=1e-6)
    np.testing.assert_allclose(head_sum, msa_sum, atol=1e-6)


def test_ablation_identities(toy):
    model, rng = toy
    pixels = rng.standard_normal((3, 4, 4)).astype(np.float32)
    d = cd.decompose_image(model, pixels)
    bank = cd.build_mean_bank([d])

    noop = cd.apply_ablation(d, cd.AblationSpec(), cd.MeanBank())
    np.testing.assert_allclose(noop, cd.reconstruct(d), atol=0)

    spec = cd.AblationSpec()
    spec.all_mlps = True
    spec.heads = [(0, 1)]
    spec.class_token_rows = True
    self_mean = cd.apply_ablation(d, spec, bank)
    np.testing.assert_allclose(self_mean, cd.reconstruct(d), atol=1e-5)


def test_textspan_variance_bound(toy, tmp_path):
    model, rng = toy
    c = rng.standard_normal((6, 6)).astype(np.float32)
    cands = rng.standard_normal((10, 6)).astype(np.float32)
    bank = cd.TextEmbeddingBank(
        [f"cand {j}" for j in range(10)], cands, "general-pool"
    )
    projected = cd.TextEmbeddingBank(
        bank.descriptions, cd.project_rows_to_span(cands, c), "general-pool"
    )
    basis = cd.textspan(c, projected, 3)
    assert len(basis.selected) == 3
    gram = basis.components @ basis.components.T
    np.testing.assert_allclose(gram, np.eye(3), atol=1e-6)
    ev = cd.explained_variance(c, basis)
    assert 0.0 <= ev <= basis.total_variance + 1e-8

    out = tmp_path / "basis.json"
    cd.save_head_basis(basis, str(out))
    loaded = cd.load_head_basis(str(out))
    assert loaded.selected == basis.selected
    np.testing.assert_allclose(loaded.components, basis.components, atol=0)


def test_archive_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    entries = {
        "a": rng.standard_normal((2, 3)).astype(np.float32),
        "b": rng.standard_normal(4),
    }
    path = tmp_path / "round.nta"
    cd.save_archive(str(path), entries)
    loaded = cd.load_archive(str(path))
    assert loaded["a"].dtype == np.float32
    assert loaded["b"].dtype == np.float64
    np.testing.assert_array_equal(loaded["a"], entries["a"])
    np.testing.assert_array_equal(loaded["b"], entries["b"])


def test_segmentation_hand_case():
    h = cd.Heatmap(np.array([[10.0, 0.0], [0.0, 0.0]], dtype=np.float32))
    mask = cd.binarize(h)
    np.testing.assert_array_equal(mask.array, [[True, False], [False, False]])
    gt = cd.BoolMask(np.array([[1, 1], [0, 0]], dtype=np.uint8))
    metrics = cd.seg_metrics(h, mask, gt, 1)
    assert metrics.pixel_accuracy == pytest.approx(3 / 4)
    assert metrics.miou == pytest.approx(7 / 12)

    perfect = cd.seg_metrics(h, gt, gt, 1)
    assert perfect.miou == pytest.approx(1.0)


def test_classify_and_retrieve(toy):
    model, rng = toy
    pixels = [rng.standard_normal((3, 4, 4)).astype(np.float32) for _ in range(3)]
    decomps = [cd.decompose_image(model, p, f"img{i}") for i, p in enumerate(pixels)]
    classes = cd.ClassBank(["a", "b"], rng.standard_normal((2, 6)).astype(np.float32))
    pred = cd.zero_shot_classify(cd.reconstruct(decomps[0]), classes)
    assert pred in (0, 1)

    result = cd.retrieve_by_head(decomps[0], decomps, 1, 0, 3)
    assert result.indices[0] in (0, 1, 2)
    assert len(result.scores) == 3
    assert sorted(result.scores, reverse=True) == list(result.scores)
