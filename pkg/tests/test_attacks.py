import numpy as np
import pytest

from colorshield import attacks as atk
from colorshield.attacks import (
    AttackConfig,
    AttackKind,
    CWParams,
    DeepFoolParams,
    JSMAParams,
    ModelSurface,
    bim,
    carlini_wagner,
    craft_batch,
    deepfool,
    fgsm,
    jsma,
    measure_distortion,
    rand_fgsm,
)
from colorshield.colorspace import ColorSpace, Image
from colorshield.model import DenseNetConfig, build


class LinearSurface:
    """logits = W @ flat(x) + b; exact gradients, for closed-form oracles."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray, shape: tuple):
        self.w = weights.astype(np.float64)  # [K, F]
        self.b = bias.astype(np.float64)
        self.space = ColorSpace.RGB
        self.num_classes = len(weights)
        self.input_shape = shape
        self.queries = 0

    def logits(self, x):
        self.queries += len(x)
        return (x.reshape(len(x), -1) @ self.w.T + self.b).astype(np.float32)

    def grad(self, x, seed_fn):
        z = self.logits(x)
        seed = seed_fn(z)
        return z, (seed @ self.w).reshape(x.shape).astype(np.float32)

    def jacobian(self, x):
        z = self.logits(x)
        jac = np.broadcast_to(self.w.reshape((1, self.num_classes) + self.input_shape),
                              (len(x), self.num_classes) + self.input_shape)
        return z, jac.astype(np.float32)


def _tiny_surface(seed=0):
    cfg = DenseNetConfig(input_size=8, blocks=2, layers_per_block=2, growth_rate=4,
                         initial_channels=8, num_classes=5)
    return ModelSurface(build(cfg, ColorSpace.RGB, seed=seed))


def _rand_img(rng, size=8):
    return Image(rng.uniform(0.1, 0.9, (size, size, 3)).astype(np.float32))


# ---------------------------------------------------------------------------
# distortion metrics


def test_distortion_identical_images():
    img = Image(np.full((5, 5, 3), 0.5))
    d = measure_distortion(img, img)
    assert (d.l2_normalized, d.linf, d.l0) == (0.0, 0.0, 0)


def test_distortion_single_pixel_arithmetic():
    a = np.zeros((10, 10, 3), dtype=np.float32)
    b = a.copy()
    b[3, 4, 1] = 0.5
    d = measure_distortion(Image(a), Image(b))
    assert d.l0 == 1
    assert d.linf == pytest.approx(0.5)
    assert d.l2_normalized == pytest.approx(0.5 / np.sqrt(300))


def test_distortion_shape_mismatch():
    from colorshield.autodiff import ShapeError

    with pytest.raises(ShapeError):
        measure_distortion(Image(np.zeros((4, 4, 3))), Image(np.zeros((5, 5, 3))))


# ---------------------------------------------------------------------------
# FGSM


def test_fgsm_epsilon_zero_is_identity():
    rng = np.random.default_rng(0)
    surface = _tiny_surface()
    img = _rand_img(rng)
    res = fgsm(surface, img, 0, AttackConfig(epsilon=0.0))
    assert np.array_equal(res.adversarial.data, img.data)
    assert res.distortion_linf == 0.0


def test_fgsm_linf_equals_epsilon_where_sign_nonzero():
    rng = np.random.default_rng(1)
    surface = _tiny_surface()
    img = Image(rng.uniform(0.3, 0.7, (8, 8, 3)).astype(np.float32))  # clamp never binds
    eps = 0.125
    res = fgsm(surface, img, 1, AttackConfig(epsilon=eps))
    diff = np.abs(res.adversarial.data.astype(np.float64) - img.data)
    _, g = surface.grad(img.data[None], atk._ce_seed(np.array([1])))
    nz = np.sign(g[0]) != 0
    assert np.allclose(diff[nz], eps, atol=1e-6)
    assert res.distortion_linf <= eps + 1e-6


def test_fgsm_linear_model_closed_form():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((2, 12))
    surface = LinearSurface(w, np.zeros(2), (2, 2, 3))
    x = rng.uniform(0.4, 0.6, (2, 2, 3)).astype(np.float32)
    eps = 0.05
    res = fgsm(surface, Image(x), 0, AttackConfig(epsilon=eps))
    # ascending the class-0 loss steps along sign(w1 - w0)
    expected = np.clip(x + eps * np.sign(w[1] - w[0]).reshape(2, 2, 3), 0, 1)
    assert np.allclose(res.adversarial.data, expected, atol=1e-6)
    # paper-sign flag reproduces the descending form
    res2 = fgsm(surface, Image(x), 0, AttackConfig(epsilon=eps, paper_sign=True))
    expected2 = np.clip(x - eps * np.sign(w[1] - w[0]).reshape(2, 2, 3), 0, 1)
    assert np.allclose(res2.adversarial.data, expected2, atol=1e-6)


def test_fgsm_zero_gradient_flagged_unsuccessful():
    surface = LinearSurface(np.zeros((2, 12)), np.zeros(2), (2, 2, 3))
    x = Image(np.full((2, 2, 3), 0.5, dtype=np.float32))
    res = fgsm(surface, x, 0, AttackConfig(epsilon=0.1))
    assert not res.success
    assert res.distortion_linf == 0.0
    assert np.array_equal(res.adversarial.data, x.data)


# ---------------------------------------------------------------------------
# RAND-FGSM


def test_rand_fgsm_alpha_zero_reduces_to_fgsm():
    rng = np.random.default_rng(3)
    surface = _tiny_surface()
    img = _rand_img(rng)
    cfg = AttackConfig(kind=AttackKind.RAND_FGSM, epsilon=0.1, alpha=0.0, seed=11)
    a = rand_fgsm(surface, img, 2, cfg)
    b = fgsm(surface, img, 2, AttackConfig(epsilon=0.1, seed=99))
    assert np.array_equal(a.adversarial.data, b.adversarial.data)


def test_rand_fgsm_linf_within_epsilon():
    rng = np.random.default_rng(4)
    surface = _tiny_surface()
    for trial in range(5):
        img = _rand_img(rng)
        res = rand_fgsm(surface, img, 1, AttackConfig(epsilon=0.2, alpha=0.05, seed=trial))
        assert res.distortion_linf <= 0.2 + 1e-6
        assert res.adversarial.data.min() >= 0 and res.adversarial.data.max() <= 1


def test_rand_fgsm_seed_reproducible():
    rng = np.random.default_rng(5)
    surface = _tiny_surface()
    img = _rand_img(rng)
    cfg = AttackConfig(epsilon=0.2, alpha=0.1, seed=7)
    a = rand_fgsm(surface, img, 3, cfg)
    b = rand_fgsm(surface, img, 3, cfg)
    assert np.array_equal(a.adversarial.data, b.adversarial.data)
    c = rand_fgsm(surface, img, 3, AttackConfig(epsilon=0.2, alpha=0.1, seed=8))
    assert not np.array_equal(a.adversarial.data, c.adversarial.data)


def test_rand_fgsm_requires_alpha_below_epsilon():
    surface = _tiny_surface()
    img = _rand_img(np.random.default_rng(6))
    with pytest.raises(ValueError, match="alpha"):
        rand_fgsm(surface, img, 0, AttackConfig(epsilon=0.1, alpha=0.1))


# ---------------------------------------------------------------------------
# BIM


def test_bim_single_step_equals_fgsm():
    rng = np.random.default_rng(7)
    surface = _tiny_surface()
    img = _rand_img(rng)
    eps = 0.07
    a = bim(surface, img, 1, AttackConfig(epsilon=eps, alpha=eps, iterations=1))
    b = fgsm(surface, img, 1, AttackConfig(epsilon=eps))
    assert np.array_equal(a.adversarial.data, b.adversarial.data)


def test_bim_iterates_stay_in_epsilon_ball():
    rng = np.random.default_rng(8)
    surface = _tiny_surface()
    for trial in range(4):
        img = _rand_img(rng)
        res = bim(surface, img, 0, AttackConfig(epsilon=0.1, alpha=0.03, iterations=7))
        assert res.distortion_linf <= 0.1 + 1e-6
        assert res.adversarial.data.min() >= 0 and res.adversarial.data.max() <= 1


def test_bim_validates_iterations_and_alpha():
    surface = _tiny_surface()
    img = _rand_img(np.random.default_rng(9))
    with pytest.raises(ValueError, match="iterations"):
        bim(surface, img, 0, AttackConfig(iterations=0))
    with pytest.raises(ValueError, match="alpha"):
        bim(surface, img, 0, AttackConfig(epsilon=0.1, alpha=0.2, iterations=2))


# ---------------------------------------------------------------------------
# DeepFool


def test_deepfool_linear_matches_hyperplane_projection():
    rng = np.random.default_rng(10)
    w = rng.standard_normal((2, 12)) * 2.0
    b = np.array([0.0, -0.3])
    surface = LinearSurface(w, b, (2, 2, 3))
    x = rng.uniform(0.35, 0.65, (2, 2, 3)).astype(np.float32)
    z = surface.logits(x[None])[0]
    pred = int(z.argmax())
    cfg = AttackConfig(deepfool=DeepFoolParams(overshoot=0.0, max_iter=10))
    res = deepfool(surface, Image(x), cfg)
    # exact point-to-hyperplane step for the 2-class linear case
    wd = (w[1 - pred] - w[pred]).reshape(2, 2, 3)
    f = abs(float(z[1 - pred] - z[pred]))
    expected = f / (wd**2).sum() * wd
    got = res.adversarial.data.astype(np.float64) - x
    assert np.abs(got - expected).max() <= 1e-4
    assert res.extra["iterations"] == 1


def test_deepfool_already_misclassified_returns_immediately():
    rng = np.random.default_rng(11)
    surface = _tiny_surface()
    img = _rand_img(rng)
    pred = int(surface.logits(img.data[None])[0].argmax())
    wrong_label = (pred + 1) % surface.num_classes
    res = deepfool(surface, img, AttackConfig(), y_true=wrong_label)
    assert res.success
    assert res.distortion_l2 == 0.0
    assert res.extra["iterations"] == 0
    assert np.array_equal(res.adversarial.data, img.data)


def test_deepfool_max_iter_reached_reports_failure():
    surface = LinearSurface(np.zeros((3, 12)), np.array([1.0, 0.0, 0.0]), (2, 2, 3))
    img = Image(np.full((2, 2, 3), 0.5, dtype=np.float32))
    res = deepfool(surface, img, AttackConfig(deepfool=DeepFoolParams(max_iter=3)))
    assert not res.success


def test_deepfool_l2_at_most_fgsm_at_matched_success():
    rng = np.random.default_rng(12)
    surface = _tiny_surface(seed=5)
    df_l2, fg_l2 = [], []
    df_hits = fg_hits = 0
    for trial in range(12):
        img = _rand_img(rng)
        y = int(surface.logits(img.data[None])[0].argmax())
        df = deepfool(surface, img, AttackConfig(), y_true=y)
        fg = fgsm(surface, img, y, AttackConfig(epsilon=0.08))
        if df.success:
            df_hits += 1
            df_l2.append(df.distortion_l2)
        if fg.success:
            fg_hits += 1
            fg_l2.append(fg.distortion_l2)
    assert df_hits >= fg_hits  # boundary-seeking attack flips at least as often
    assert np.mean(df_l2) <= np.mean(fg_l2)


# ---------------------------------------------------------------------------
# JSMA


class MLPSurface:
    """Two-layer net on the engine, exposing the surface protocol."""

    def __init__(self, shape, hidden=6, classes=3, seed=0):
        from colorshield import autodiff as ad
        from colorshield.autodiff import Tensor

        rng = np.random.default_rng(seed)
        f = int(np.prod(shape))
        self.w1 = Tensor(rng.standard_normal((f, hidden)).astype(np.float32))
        self.w2 = Tensor(rng.standard_normal((hidden, classes)).astype(np.float32))
        self.space = ColorSpace.RGB
        self.num_classes = classes
        self.input_shape = shape
        self.queries = 0

    def _graph(self, x):
        from colorshield import autodiff as ad
        from colorshield.autodiff import Tensor

        xt = Tensor(x.reshape(len(x), -1), requires_grad=True)
        h = ad.relu(ad.matmul(xt, self.w1))
        return xt, ad.matmul(h, self.w2)

    def logits(self, x):
        self.queries += len(x)
        return self._graph(x)[1].data

    def grad(self, x, seed_fn):
        from colorshield import autodiff as ad

        self.queries += len(x)
        with ad.tape() as tp:
            xt, z = self._graph(x)
        seed = seed_fn(z.data)
        return z.data, tp.gradients(z, [xt], seed)[0].reshape(x.shape)

    def jacobian(self, x):
        from colorshield import autodiff as ad

        self.queries += len(x)
        with ad.tape() as tp:
            xt, z = self._graph(x)
        rows = []
        for cls in range(self.num_classes):
            seed = np.zeros((len(x), self.num_classes))
            seed[:, cls] = 1.0
            rows.append(tp.gradients(z, [xt], seed)[0].reshape(x.shape))
        return z.data, np.stack(rows, axis=1)


def test_jsma_zero_budget_fails_unchanged():
    x = np.random.default_rng(13).uniform(0.2, 0.8, (4, 4, 3)).astype(np.float32)
    surface = MLPSurface((4, 4, 3), seed=1)
    pred = int(surface.logits(x[None])[0].argmax())
    target = (pred + 1) % 3
    res = jsma(surface, Image(x), target, AttackConfig(jsma=JSMAParams(gamma=1.0 / x.size)))
    assert not res.success
    assert np.array_equal(res.adversarial.data, x)


def test_jsma_budget_respected():
    rng = np.random.default_rng(14)
    surface = MLPSurface((4, 4, 3), seed=2)
    x = rng.uniform(0.2, 0.8, (4, 4, 3)).astype(np.float32)
    pred = int(surface.logits(x[None])[0].argmax())
    target = (pred + 1) % 3
    gamma = 0.2
    res = jsma(surface, Image(x), target, AttackConfig(jsma=JSMAParams(theta=0.4, gamma=gamma)))
    assert res.extra["features_modified"] <= gamma * x.size


def test_jsma_first_pair_matches_exhaustive_search():
    rng = np.random.default_rng(15)
    surface = MLPSurface((4, 4, 3), hidden=8, classes=3, seed=3)
    x = rng.uniform(0.3, 0.7, (4, 4, 3)).astype(np.float32)
    pred = int(surface.logits(x[None])[0].argmax())
    target = (pred + 1) % 3
    _, jac = surface.jacobian(x[None])
    flat = jac[0].reshape(3, -1)

    # independent oracle: loop every pair p<q with the saliency rule
    jt = flat[target].astype(np.float64)
    other = flat.sum(axis=0).astype(np.float64) - jt
    best_pair, best_score = None, -np.inf
    f = x.size
    for p in range(f):
        for q in range(p + 1, f):
            a = jt[p] + jt[q]
            bsum = other[p] + other[q]
            if a <= 0 or bsum >= 0:
                continue
            score = -a * bsum
            if score > best_score:
                best_pair, best_score = (p, q), score
    if best_pair is None:
        pytest.skip("no admissible pair for this seed")

    gamma = 2.0 / f  # budget for exactly one pair
    res = jsma(surface, Image(x), target, AttackConfig(jsma=JSMAParams(theta=0.3, gamma=gamma)))
    changed = np.flatnonzero(res.adversarial.data.ravel() != x.ravel())
    assert tuple(changed) == best_pair


def test_jsma_rejects_target_equal_prediction():
    surface = MLPSurface((4, 4, 3), seed=4)
    x = np.random.default_rng(16).uniform(0.2, 0.8, (4, 4, 3)).astype(np.float32)
    pred = int(surface.logits(x[None])[0].argmax())
    with pytest.raises(ValueError, match="target"):
        jsma(surface, Image(x), pred, AttackConfig())


# ---------------------------------------------------------------------------
# Carlini-Wagner


def test_cw_already_misclassified_near_zero_distortion():
    rng = np.random.default_rng(17)
    surface = _tiny_surface(seed=6)
    img = _rand_img(rng)
    pred = int(surface.logits(img.data[None])[0].argmax())
    wrong = (pred + 1) % surface.num_classes
    cfg = AttackConfig(kind=AttackKind.CW, cw=CWParams(steps=40, c_search_steps=2, lr=5e-3))
    res = carlini_wagner(surface, img, wrong, cfg)
    assert res.success
    assert res.distortion_l2 <= 1e-3


def test_cw_binary_search_monotone_trace():
    rng = np.random.default_rng(18)
    surface = _tiny_surface(seed=7)
    img = _rand_img(rng)
    y = int(surface.logits(img.data[None])[0].argmax())
    cfg = AttackConfig(kind=AttackKind.CW, cw=CWParams(steps=60, c_search_steps=5, lr=2e-2))
    res = carlini_wagner(surface, img, y, cfg)
    trace = res.extra["c_trace"]
    assert len(trace) == 5
    # upward-closed success set: no success at some c with a failure at larger c
    for c1, ok1 in trace:
        for c2, ok2 in trace:
            if ok1 and c2 > c1:
                assert ok2, f"success at c={c1} but failure at larger c={c2}"


def test_cw_returned_c_not_above_succeeding_c():
    rng = np.random.default_rng(19)
    surface = _tiny_surface(seed=8)
    img = _rand_img(rng)
    y = int(surface.logits(img.data[None])[0].argmax())
    cfg = AttackConfig(kind=AttackKind.CW, cw=CWParams(steps=60, c_search_steps=4, lr=2e-2))
    res = carlini_wagner(surface, img, y, cfg)
    trace = res.extra["c_trace"]
    if trace[0][1]:  # success at c_init: binary search may only shrink c
        assert all(c <= trace[0][0] + 1e-12 for c, _ in trace)


def test_cw_adversarial_in_unit_box():
    rng = np.random.default_rng(20)
    surface = _tiny_surface(seed=9)
    img = Image(rng.uniform(0.0, 1.0, (8, 8, 3)).astype(np.float32))
    cfg = AttackConfig(kind=AttackKind.CW, cw=CWParams(steps=30, c_search_steps=2))
    res = carlini_wagner(surface, img, 0, cfg)
    assert res.adversarial.data.min() >= 0.0
    assert res.adversarial.data.max() <= 1.0


def test_cw_kappa_validation():
    with pytest.raises(ValueError, match="kappa"):
        CWParams(kappa=-1.0)
    with pytest.raises(ValueError, match="gamma"):
        JSMAParams(gamma=0.0)


# ---------------------------------------------------------------------------
# cross-cutting invariants


def test_all_attacks_stay_in_unit_box_and_epsilon_ball():
    rng = np.random.default_rng(21)
    surface = _tiny_surface(seed=10)
    eps = 0.12
    for trial in range(6):
        img = Image(rng.uniform(0.0, 1.0, (8, 8, 3)).astype(np.float32))
        y = int(rng.integers(0, surface.num_classes))
        for cfg in (
            AttackConfig(kind=AttackKind.FGSM, epsilon=eps),
            AttackConfig(kind=AttackKind.RAND_FGSM, epsilon=eps, alpha=0.04, seed=trial),
            AttackConfig(kind=AttackKind.BIM, epsilon=eps, alpha=0.04, iterations=4),
        ):
            res = atk.run_attack(surface, img, y, cfg)
            assert res.adversarial.data.min() >= 0.0
            assert res.adversarial.data.max() <= 1.0
            assert res.distortion_linf <= eps + 1e-6


def test_craft_batch_matches_single_image_calls():
    rng = np.random.default_rng(22)
    surface = _tiny_surface(seed=11)
    x = rng.uniform(0.1, 0.9, (4, 8, 8, 3)).astype(np.float32)
    y = rng.integers(0, 5, 4)
    cfg = AttackConfig(kind=AttackKind.BIM, epsilon=0.1, alpha=0.05, iterations=3)
    batch_out = craft_batch(surface, x, y, cfg)
    for i in range(4):
        single = bim(surface, Image(x[i]), int(y[i]), cfg)
        assert np.allclose(batch_out[i], single.adversarial.data, atol=1e-6)


def test_attacks_are_surface_agnostic():
    # the same code path must accept a bare model and the defended pipeline
    from colorshield.defense import DefensePipeline, differentiable_view
    from colorshield.denoise import DenoiseParams

    rng = np.random.default_rng(23)
    cfg = DenseNetConfig(input_size=8, blocks=2, layers_per_block=1, growth_rate=4,
                         initial_channels=8, num_classes=4)
    members = {
        space: build(cfg, space, seed=i)
        for i, space in enumerate((ColorSpace.RGB, ColorSpace.LAB, ColorSpace.HSV, ColorSpace.YUV))
    }
    pipeline = DefensePipeline(members=members, denoiser=DenoiseParams(levels=2))
    img = Image(rng.uniform(0.2, 0.8, (8, 8, 3)).astype(np.float32))
    attack_cfg = AttackConfig(epsilon=0.1)
    for surface in (ModelSurface(members[ColorSpace.RGB]), differentiable_view(pipeline)):
        res = fgsm(surface, img, 1, attack_cfg)
        assert res.adversarial.data.shape == img.data.shape
        assert res.distortion_linf <= 0.1 + 1e-6


def test_run_attack_dispatch_unknown_target_requirements():
    surface = _tiny_surface(seed=12)
    img = _rand_img(np.random.default_rng(24))
    with pytest.raises(ValueError, match="target"):
        atk.run_attack(surface, img, 0, AttackConfig(kind=AttackKind.JSMA, target=None))
