"""Attack semantics: specs, distortion metrics, projections, budgets,
label independence, momentum oracle, diversity transform, BPDA."""

import numpy as np
import pytest

from conftest import small_classifier, small_extractor
from nrp.attacks import (AttackError, AttackSpec, bpda_attack, dim, feature_distortion,
                         feature_distortion_per_sample, fgsm, ifgsm, input_diversity_transform,
                         linf_project, mifgsm, rfgsm, run_attack, ssp_attack)
from nrp.networks import (LayerSpec, NetworkDef, build_identity, build_toy_classifier, forward)
from nrp.rng import SeededRng
from nrp.tensor import Tensor
from nrp.training import freeze

BUDGET_SLACK = 2.0 ** -20


def _images(n=4, hw=16, seed=0):
    return SeededRng(seed).uniform((n, 3, hw, hw)).astype(np.float32)


def assert_budget(x_adv, x, eps):
    assert np.abs(x_adv - x).max() <= eps + BUDGET_SLACK
    assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


class TestAttackSpec:
    def test_validation(self):
        with pytest.raises(AttackError):
            AttackSpec(method="pgd", epsilon=0.1, step=0.01)
        with pytest.raises(AttackError):
            AttackSpec(method="ssp", epsilon=0.1, step=0.2)  # step > eps
        with pytest.raises(AttackError):
            AttackSpec(method="ssp", epsilon=-0.1, step=0.01)
        with pytest.raises(AttackError):
            AttackSpec(method="dim", epsilon=0.1, step=0.01, diversity_prob=1.5)
        with pytest.raises(AttackError):
            AttackSpec(method="ssp", epsilon=0.1, step=0.01, metric="wasserstein")

    def test_zero_epsilon_degenerate_allowed(self):
        spec = AttackSpec(method="ssp", epsilon=0.0, step=1.0, iters=3)
        assert spec.epsilon == 0.0

    def test_digest_stable_and_descriptive(self):
        spec = AttackSpec(method="ssp", epsilon=16 / 255, step=1.6 / 255, iters=100, tap="b3c3")
        assert spec.digest() == AttackSpec(**{**spec.__dict__}).digest()
        assert "method=ssp" in spec.digest() and "tap=b3c3" in spec.digest()


class TestFeatureDistortion:
    def test_identity_is_zero(self):
        ext = small_extractor()
        x = _images()
        assert feature_distortion(ext, x, x).item() == 0.0

    def test_symmetry_mae(self):
        ext = small_extractor()
        a, b = _images(seed=1), _images(seed=2)
        d1 = feature_distortion(ext, a, b, metric="mae").item()
        d2 = feature_distortion(ext, b, a, metric="mae").item()
        assert d1 == pytest.approx(d2, rel=1e-6)

    def test_symmetry_l2_and_cosine_near_zero_at_identity(self):
        ext = small_extractor()
        a, b = _images(seed=1), _images(seed=2)
        assert feature_distortion(ext, a, b, "b2c2", "l2").item() == pytest.approx(
            feature_distortion(ext, b, a, "b2c2", "l2").item(), rel=1e-6)
        assert feature_distortion(ext, a, a, "b2c2", "l2").item() == 0.0
        assert feature_distortion(ext, a, a, "b2c2", "cosine").item() == pytest.approx(0.0, abs=1e-6)

    def test_hand_built_single_conv_extractor(self):
        # one 1x1 conv with kernel 2.0 on 2x2 single-channel images: the tap
        # is 2*x, so MAE distortion is 2 * mean|x - y|.
        nodes = [LayerSpec("image", "input"),
                 LayerSpec("c_conv", "conv", ("image",), {"stride": 1, "padding": 0}),
                 LayerSpec("feat", "lrelu", ("c_conv",), {"slope": 0.0})]
        params = {"c_conv.w": Tensor(np.full((1, 1, 1, 1), 2.0, np.float32), requires_grad=True),
                  "c_conv.b": Tensor(np.zeros((1, 1, 1, 1), np.float32), requires_grad=True)}
        net = NetworkDef(nodes, params, {}, ("feat",), {"default_tap": "feat"})
        x = np.array([[[[0.1, 0.2], [0.3, 0.4]]]], dtype=np.float32)
        y = np.array([[[[0.2, 0.2], [0.1, 0.8]]]], dtype=np.float32)
        expected = 2.0 * np.abs(x - y).mean()
        assert feature_distortion(net, x, y, "feat").item() == pytest.approx(expected, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        ext = small_extractor()
        with pytest.raises(AttackError):
            feature_distortion(ext, _images(n=2), _images(n=3))

    def test_per_sample_matches_batch_mean(self):
        ext = small_extractor()
        a, b = _images(seed=3), _images(seed=4)
        per = feature_distortion_per_sample(ext, a, b)
        batch = feature_distortion(ext, a, b).item()
        assert per.shape == (len(a),)
        assert per.mean() == pytest.approx(batch, rel=1e-5)


class TestProjection:
    def test_zero_epsilon_returns_x(self):
        x = _images()
        moved = np.clip(x + 0.3, 0, 1)
        assert np.array_equal(linf_project(moved, x, 0.0), x)

    def test_saturating_overshoot(self):
        x = _images()
        eps = 0.1
        out = linf_project(x + 2 * eps, x, eps)
        assert np.allclose(out, np.minimum(x + eps, 1.0), atol=1e-7)

    def test_negative_epsilon_rejected(self):
        x = _images()
        with pytest.raises(AttackError):
            linf_project(x, x, -0.01)

    def test_bound_holds_randomized(self):
        rng = SeededRng(5)
        for trial in range(200):
            shape = (2, 3, 4, 4)
            x = rng.uniform(shape)
            cand = rng.uniform(shape, -1.0, 2.0)
            eps = float(rng.uniform((), 0.0, 0.5))
            out = linf_project(cand.astype(np.float32), x, eps)
            assert_budget(out, x, eps)


class TestSsp:
    def test_zero_iters_is_clipped_random_init(self):
        ext = freeze(small_extractor())
        x = _images(seed=6)
        spec = AttackSpec(method="ssp", epsilon=0.05, step=0.01, iters=0, tap="b2c2", seed=3)
        out = ssp_attack(ext, x, spec)
        rng = SeededRng(3)
        expected = linf_project(x + rng.uniform(x.shape, -0.025, 0.025, dtype=x.dtype), x, 0.05)
        assert np.array_equal(out, expected)

    def test_paper_defaults_budget(self):
        ext = freeze(small_extractor())
        x = _images(n=2, seed=7)
        spec = AttackSpec(method="ssp", epsilon=16 / 255, step=1.6 / 255, iters=100,
                          tap="b2c2", seed=1)
        out = ssp_attack(ext, x, spec)
        assert_budget(out, x, 16 / 255)

    def test_distortion_grows_with_iterations(self):
        ext = freeze(small_extractor())
        x = _images(n=16, seed=8)
        spec1 = AttackSpec(method="ssp", epsilon=16 / 255, step=1.6 / 255, iters=1,
                           tap="b2c2", seed=5)
        spec20 = AttackSpec(method="ssp", epsilon=16 / 255, step=1.6 / 255, iters=20,
                            tap="b2c2", seed=5)
        d1 = feature_distortion_per_sample(ext, x, ssp_attack(ext, x, spec1), "b2c2")
        d20 = feature_distortion_per_sample(ext, x, ssp_attack(ext, x, spec20), "b2c2")
        assert (d20 > d1).mean() >= 0.9

    def test_deterministic_per_seed(self):
        ext = freeze(small_extractor())
        x = _images(seed=9)
        spec = AttackSpec(method="ssp", epsilon=0.05, step=0.01, iters=4, tap="b2c2", seed=7)
        assert np.array_equal(ssp_attack(ext, x, spec), ssp_attack(ext, x, spec))

    def test_takes_no_labels_anywhere(self):
        import inspect
        assert "labels" not in inspect.signature(ssp_attack).parameters


class TestBaselines:
    def setup_method(self):
        self.clf = freeze(small_classifier())
        self.x = _images(n=6, seed=10)
        self.labels = SeededRng(11).integers(0, 4, size=6)

    def test_fgsm_linear_model_hand_computed(self):
        # logits = pixel values of a 1x1x1x2 image through gap+dense identity:
        # CE gradient and the resulting sign step are hand-checkable.
        nodes = [LayerSpec("image", "input"), LayerSpec("gap", "gap", ("image",)),
                 LayerSpec("logits", "dense", ("gap",))]
        params = {"logits.w": Tensor(np.eye(2, dtype=np.float64), requires_grad=True),
                  "logits.b": Tensor(np.zeros(2, dtype=np.float64), requires_grad=True)}
        net = NetworkDef(nodes, params, {}, (), {"dtype": np.float64})
        x = np.array([[[[0.6]], [[0.4]]]], dtype=np.float64)  # logits (0.6, 0.4)
        labels = np.array([0])
        eps = 0.1
        out = fgsm(net, x, labels, AttackSpec(method="fgsm", epsilon=eps, step=eps, iters=1))
        # dCE/dz = softmax - onehot = (p0-1, p1); dz/dx = identity per channel
        z = np.array([0.6, 0.4])
        p = np.exp(z) / np.exp(z).sum()
        gsign = np.sign(np.array([p[0] - 1.0, p[1]]))
        expected = np.clip(x + eps * gsign.reshape(1, 2, 1, 1), 0, 1)
        assert np.allclose(out, expected, atol=1e-12)

    @pytest.mark.parametrize("method", ["fgsm", "rfgsm", "ifgsm", "mifgsm", "dim"])
    def test_budget_invariant(self, method):
        spec = AttackSpec(method=method, epsilon=16 / 255, step=1.6 / 255, iters=5, seed=2)
        out = run_attack(spec, self.x, labels=self.labels, classifier=self.clf)
        assert_budget(out, self.x, 16 / 255)

    def test_ifgsm_paper_parameters_run(self):
        spec = AttackSpec(method="ifgsm", epsilon=16 / 255, step=1.6 / 255, iters=10, seed=2)
        out = ifgsm(self.clf, self.x, self.labels, spec)
        assert_budget(out, self.x, 16 / 255)

    def test_mifgsm_momentum_is_running_sum_of_l1_normalized_gradients(self):
        # mu=1 on a 2-parameter linear model, checked exactly in f64
        nodes = [LayerSpec("image", "input"), LayerSpec("gap", "gap", ("image",)),
                 LayerSpec("logits", "dense", ("gap",))]
        w = np.array([[1.0, -0.5], [0.3, 0.8]])
        params = {"logits.w": Tensor(w, requires_grad=True, dtype=np.float64),
                  "logits.b": Tensor(np.zeros(2, dtype=np.float64), requires_grad=True)}
        net = NetworkDef(nodes, params, {}, (), {"dtype": np.float64})
        x = np.array([[[[0.55]], [[0.45]]], [[[0.2]], [[0.9]]]], dtype=np.float64)
        labels = np.array([0, 1])
        spec = AttackSpec(method="mifgsm", epsilon=0.12, step=0.02, iters=6, momentum=1.0)
        trace = {}
        mifgsm(net, x, labels, spec, trace=trace)
        running = np.zeros_like(x)
        for g, mom in zip(trace["gradients"], trace["momentum"]):
            l1 = np.abs(g).sum(axis=(1, 2, 3), keepdims=True)
            running = running + np.divide(g, l1, out=np.zeros_like(g), where=l1 > 0)
            assert np.array_equal(mom, running)

    def test_rfgsm_uses_random_then_gradient_step(self):
        spec = AttackSpec(method="rfgsm", epsilon=0.09, step=0.03, iters=1, seed=4)
        out1 = rfgsm(self.clf, self.x, self.labels, spec)
        out2 = rfgsm(self.clf, self.x, self.labels, spec)
        assert np.array_equal(out1, out2)
        assert_budget(out1, self.x, 0.09)


class TestInputDiversity:
    def test_p_zero_identity(self):
        x = Tensor(_images(seed=12))
        for seed in range(5):
            out = input_diversity_transform(x, 0.0, seed)
            assert out is x

    def test_p_one_transforms_and_preserves_shape(self):
        x = Tensor(_images(seed=13))
        out = input_diversity_transform(x, 1.0, 3)
        assert out.shape == x.shape
        assert not np.array_equal(out.data, x.data)

    def test_fixed_seed_deterministic(self):
        x = Tensor(_images(seed=14))
        a = input_diversity_transform(x, 1.0, 9).data
        b = input_diversity_transform(x, 1.0, 9).data
        assert np.array_equal(a, b)


class TestBpda:
    def test_identity_purifier_reduces_to_plain_attack(self):
        clf = freeze(small_classifier())
        x = _images(n=3, seed=15)
        labels = SeededRng(16).integers(0, 4, size=3)
        spec = AttackSpec(method="ifgsm", epsilon=0.06, step=0.01, iters=4, seed=5)
        plain = ifgsm(clf, x, labels, spec)
        through = bpda_attack(build_identity(), clf, x, spec, labels=labels)
        assert np.array_equal(plain, through)

    def test_identity_purifier_reduces_for_ssp_variant(self):
        ext = freeze(small_extractor())
        x = _images(n=3, seed=17)
        spec = AttackSpec(method="ssp", epsilon=0.06, step=0.01, iters=4, tap="b2c2", seed=6)
        plain = ssp_attack(ext, x, spec)
        through = bpda_attack(build_identity(), ext, x,
                              AttackSpec(method="bpda_ssp", epsilon=0.06, step=0.01, iters=4,
                                         tap="b2c2", seed=6))
        assert np.array_equal(plain, through)

    def test_budget_invariant_randomized(self):
        ext = freeze(small_extractor())
        clf = freeze(small_classifier())
        from conftest import small_purifier
        purifier = small_purifier()
        rng = SeededRng(18)
        for trial in range(30):
            eps = float(rng.uniform((), 0.01, 0.12))
            x = rng.uniform((2, 3, 16, 16)).astype(np.float32)
            labels = rng.integers(0, 4, size=2)
            if trial % 2 == 0:
                spec = AttackSpec(method="bpda_ssp", epsilon=eps, step=eps / 3, iters=3,
                                  tap="b2c2", seed=trial)
                out = bpda_attack(purifier, ext, x, spec)
            else:
                spec = AttackSpec(method="ifgsm", epsilon=eps, step=eps / 3, iters=3, seed=trial)
                out = bpda_attack(purifier, clf, x, spec, labels=labels)
            assert_budget(out, x, eps)

    def test_cross_entropy_base_needs_labels(self):
        clf = freeze(small_classifier())
        from conftest import small_purifier
        with pytest.raises(AttackError):
            bpda_attack(small_purifier(), clf, _images(n=2),
                        AttackSpec(method="ifgsm", epsilon=0.05, step=0.01, iters=2))


class TestDispatcher:
    def test_missing_context_rejected(self):
        with pytest.raises(AttackError):
            run_attack(AttackSpec(method="ssp", epsilon=0.1, step=0.01), _images())
        with pytest.raises(AttackError):
            run_attack(AttackSpec(method="fgsm", epsilon=0.1, step=0.1), _images())

    def test_all_methods_deterministic_given_seed(self):
        ext = freeze(small_extractor())
        clf = freeze(small_classifier())
        from conftest import small_purifier
        purifier = small_purifier()
        x = _images(n=2, seed=19)
        labels = SeededRng(20).integers(0, 4, size=2)
        for method in ("fgsm", "rfgsm", "ifgsm", "mifgsm", "dim", "ssp", "bpda_ssp"):
            spec = AttackSpec(method=method, epsilon=0.08, step=0.02, iters=3,
                              tap="b2c2", seed=21)
            a = run_attack(spec, x, labels=labels, extractor=ext, classifier=clf,
                           purifier=purifier)
            b = run_attack(spec, x, labels=labels, extractor=ext, classifier=clf,
                           purifier=purifier)
            assert np.array_equal(a, b), method
