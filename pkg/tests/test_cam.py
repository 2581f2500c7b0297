import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from drrg.cam import (
    ClassifierModel,
    TrainConfig,
    build_dom,
    build_dom_pool,
    build_doms,
    cam_from_features,
    compress_dom,
    compute_cam,
    load_pool,
    localization_ratio,
    train_classifier,
)
from drrg.corpus import CorpusConfig, generate_corpus
from drrg.errors import ContractError
from drrg.numerics import Tensor, no_grad
from drrg.numerics._kernels import bilinear_upsample


def jacobi_eigh(a, sweeps=100, tol=1e-15):
    """Cyclic Jacobi rotations for a symmetric matrix; returns (eigvals, eigvecs)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt((np.tril(a, -1) ** 2).sum())
        if off < tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1)) if theta != 0 else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def best_rank_error(m, rank):
    # Eckart-Young: the residual is the energy in the discarded eigenvalues of M^T M
    w, _ = jacobi_eigh(m.T @ m)
    w = np.sort(np.maximum(w, 0.0))[::-1]
    return float(np.sqrt(w[rank:].sum()))


def reconstruction_error(raw, compressed):
    m = raw.reshape(-1, raw.shape[-1])
    c = compressed.reshape(-1, compressed.shape[-1])
    proj = c @ np.linalg.lstsq(c, m, rcond=None)[0]
    return float(np.linalg.norm(m - proj))


# ------------------------------------------------------------- the oracle


def test_jacobi_oracle_agrees_with_known_spectrum():
    q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(5, 5)))
    a = q @ np.diag([5.0, 3.0, 2.0, 1.0, 0.5]) @ q.T
    w, v = jacobi_eigh(a)
    np.testing.assert_allclose(np.sort(w), [0.5, 1.0, 2.0, 3.0, 5.0], atol=1e-12)
    np.testing.assert_allclose(v @ np.diag(w) @ v.T, a, atol=1e-12)


# ------------------------------------------------------------ compression


def test_compress_matches_eckart_young_bound():
    rng = np.random.default_rng(1)
    for _ in range(100):
        raw = rng.random((8, 8, 6))
        comp = compress_dom(raw)
        assert comp.shape == (8, 8, 3)
        assert reconstruction_error(raw, comp) <= best_rank_error(raw.reshape(64, 6), 3) + 1e-9


def test_rank_one_input():
    raw = np.zeros((8, 8, 6))
    raw[..., 0] = np.random.default_rng(2).random((8, 8))
    comp = compress_dom(raw)
    np.testing.assert_allclose(comp[..., 1:], 0.0, atol=1e-12)
    ratio = comp[..., 0] / raw[..., 0]
    np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-12)
    assert reconstruction_error(raw, comp) < 1e-12


def test_sign_convention():
    comp = compress_dom(np.random.default_rng(3).normal(size=(6, 6, 5)))
    for i in range(3):
        col = comp[..., i].ravel()
        assert col[np.argmax(np.abs(col))] > 0


def test_compression_is_idempotent_in_span():
    rng = np.random.default_rng(4)
    raw = rng.random((8, 8, 6))
    once = compress_dom(raw)
    twice = compress_dom(once.reshape(8, 8, 3))
    a, b = once.reshape(64, 3), twice.reshape(64, 3)
    qa, _ = np.linalg.qr(a)
    qb, _ = np.linalg.qr(b)
    cosines = np.linalg.svd(qa.T @ qb, compute_uv=False)
    np.testing.assert_allclose(cosines, 1.0, atol=1e-9)


def test_too_few_channels():
    with pytest.raises(ContractError, match="pass-through"):
        compress_dom(np.zeros((4, 4, 2)))


# ------------------------------------------------------------------- CAMs


def test_one_hot_features_with_identity_weights():
    feats = np.zeros((4, 8, 8))
    feats[2, 3, 5] = 1.0
    cam = cam_from_features(feats, np.eye(4), 2, (32, 32))
    np.testing.assert_array_equal(cam.values, feats[2])
    brute = sum(np.eye(4)[2, k] * feats[k] for k in range(4))
    up = bilinear_upsample(brute, 32, 32)
    np.testing.assert_allclose(cam.upsampled, (up - up.min()) / (up.max() - up.min()), atol=1e-12)


def test_zero_features_give_zero_cam():
    cam = cam_from_features(np.zeros((4, 8, 8)), np.random.default_rng(5).normal(size=(3, 4)), 1, (64, 64))
    assert not cam.upsampled.any() and not cam.values.any()


def test_negative_map_is_clamped_to_zero():
    feats = np.ones((2, 4, 4))
    cam = cam_from_features(feats, -np.ones((1, 2)), 0, (8, 8))
    assert not cam.upsampled.any()


def test_class_index_out_of_range():
    model = ClassifierModel(3, (4, 4, 4))
    with pytest.raises(ContractError):
        compute_cam(model, np.zeros((1, 16, 16)), 3)


def test_cam_sum_equals_logit_minus_bias():
    rng = np.random.default_rng(6)
    model = ClassifierModel(4, (4, 6, 8), seed=1)
    model.head.bias.data = rng.normal(size=4)
    img = rng.random((1, 32, 32))
    with no_grad():
        logits = model.logits(Tensor(img[None])).data[0]
    for c in range(4):
        raw = compute_cam(model, img, c).raw
        h, w = raw.shape
        assert abs(raw.sum() - h * w * (logits[c] - model.head.bias.data[c])) < 1e-6


# ------------------------------------------------------------- training


def test_single_sample_memorised():
    corpus = [s for s in generate_corpus(3, 20) if s.labels.any()][:1]
    model = train_classifier(corpus, TrainConfig(epochs=50, batch_size=1))
    assert model.curve[-1] < 0.05


def test_all_negative_corpus_predicts_negative():
    corpus = [s for s in generate_corpus(4, 400) if not s.labels.any()]
    train, held = corpus[:30], corpus[30:]
    model = train_classifier(train, TrainConfig(epochs=10))
    assert model.predict_proba(np.stack([s.image for s in held])).max() <= 0.5


def test_training_is_deterministic():
    corpus = generate_corpus(5, 16)
    a = train_classifier(corpus, TrainConfig(epochs=2))
    b = train_classifier(corpus, TrainConfig(epochs=2))
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])


@pytest.fixture(scope="module")
def trained():
    corpus = generate_corpus(11, 500)
    model = train_classifier(corpus[:400], TrainConfig())
    return model, corpus[400:]


def test_held_out_auc(trained):
    model, held = trained
    proba = model.predict_proba(np.stack([s.image for s in held]))
    labels = np.stack([s.labels for s in held])
    aucs = [roc_auc_score(labels[:, c], proba[:, c]) for c in range(labels.shape[1])]
    assert np.mean(aucs) >= 0.95, aucs


def test_normals_have_flat_doms(trained):
    model, held = trained
    for s in held:
        if not s.labels.any():
            assert build_dom(model, s.image).raw.max() <= 0.2


def test_localization_on_single_disease_samples(trained):
    model, held = trained
    rng = np.random.default_rng(0)
    ratios = []
    for s in held:
        if s.labels.sum() != 1:
            continue
        c = int(np.flatnonzero(s.labels)[0])
        cam = compute_cam(model, s.image, c).upsampled
        ratios.append(localization_ratio(cam, s.lesions[0].box(64), rng))
    assert len(ratios) >= 20
    assert np.mean(np.asarray(ratios) >= 2.0) >= 0.9


def test_dom_channels_are_class_cams(trained):
    model, held = trained
    s = held[0]
    dom = build_dom(model, s.image, s.id)
    for c in range(model.n_classes):
        np.testing.assert_array_equal(dom.raw[..., c], compute_cam(model, s.image, c).upsampled)
    batched = build_doms(model, held[:3])
    np.testing.assert_allclose(batched[0].raw, dom.raw, atol=1e-12)
    np.testing.assert_array_equal(build_dom(model, s.image).raw, dom.raw)


def test_pool_round_trip_and_rebuild(trained, tmp_path):
    model, held = trained
    subset = held[:10]
    entries = build_dom_pool(model, subset, tmp_path / "a.domp")
    build_dom_pool(model, subset, tmp_path / "b.domp")
    assert (tmp_path / "a.domp").read_bytes() == (tmp_path / "b.domp").read_bytes()
    back = load_pool(tmp_path / "a.domp")
    assert len(back) == len(subset)
    for (sid, arr), (sid2, arr2), s in zip(entries, back, subset):
        assert sid == sid2 == s.id
        assert arr.tobytes() == arr2.tobytes()


def test_classifier_state_round_trip(trained, tmp_path):
    from drrg.numerics import load_tensors, save_tensors

    model, held = trained
    save_tensors(tmp_path / "c.drrg", model.state_dict())
    again = ClassifierModel.from_state(load_tensors(tmp_path / "c.drrg"))
    img = held[0].image
    np.testing.assert_array_equal(compute_cam(again, img, 0).upsampled, compute_cam(model, img, 0).upsampled)


def test_fourteen_class_classifier_runs():
    corpus = generate_corpus(2, 12, CorpusConfig(n_classes=14, grammar="grammar14", prevalence=0.1))
    model = train_classifier(corpus, TrainConfig(epochs=1))
    assert build_dom(model, corpus[0].image).raw.shape == (64, 64, 14)
