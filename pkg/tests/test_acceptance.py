"""End-to-end acceptance suite on the seeded refnet pipeline.

Each test prints one PASS/FAIL line so the suite doubles as a checklist.
The shared fixtures train a lightly-trained gap_linear refnet (one epoch,
lr 0.3) on a 2000-sample shapes dataset: accuracy stays >= 0.95 while the
logits stay inside the non-saturated range of the common tanh scale.
"""

import functools
import math

import numpy as np
import pytest

from ifa import archive as ar
from ifa import campipe as cp
from ifa import distribution as ds
from ifa import evaluation as ev
from ifa import importance as im
from ifa import refnet as rn
from ifa import render as rd


def checklist(number, title):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[{number:>2}] FAIL  {title}")
                raise
            print(f"\n[{number:>2}] PASS  {title}")
        return wrapper
    return deco


@pytest.fixture(scope="module")
def train_dataset():
    return rn.gen_dataset(42, 2000)


@pytest.fixture(scope="module")
def model(train_dataset):
    m = rn.train(train_dataset, "gap_linear", epochs=1, lr=0.3, seed=0)
    assert rn.accuracy(m, train_dataset) >= 0.95
    return m


@pytest.fixture(scope="module")
def train_archive(model, train_dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "train"
    rn.dump_archive(model, train_dataset, path, grads="all", dataset_split="train")
    return path


@pytest.fixture(scope="module")
def test_archive(model, tmp_path_factory):
    path = tmp_path_factory.mktemp("acc") / "test"
    rn.dump_archive(model, rn.gen_dataset(777, 500), path, grads="all", dataset_split="test")
    return path


@pytest.fixture(scope="module")
def train_stats(train_archive):
    return ds.collect_stats(train_archive, "grad_cam", "gt")


def cam_sums_and_logits(archive, scheme, class_id, scale_mode, stats=None, target=None):
    sums, logits = [], []
    by_id = {rec.sample_id: rec for rec in ar.iter_samples(archive)}
    for res in cp.generate(archive, scheme, class_id, scale_mode, stats=stats,
                           target_dims=target):
        sums.append(res.sum)
        logits.append(float(by_id[res.sample_id].logits[res.class_id]))
    return np.asarray(sums), np.asarray(logits)


@checklist(1, "common-scale boundary conditions hold; sign-flipped beta variant fails")
def test_01_sigma_boundaries():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        p10 = float(rng.uniform(-100, 100))
        p90 = p10 + float(rng.uniform(1e-3, 200))
        params = cp.sigma_from_percentiles(p10, p90)
        assert abs(math.tanh(params.alpha * p10 + params.beta) - 0.1) <= 1e-9
        assert abs(math.tanh(params.alpha * p90 + params.beta) - 0.9) <= 1e-9
    # regression: the beta variant with flipped numerator misses its anchors
    p10, p90 = 0.0, 1.0
    alpha = (math.atanh(0.9) - math.atanh(0.1)) / (p90 - p10)
    beta_bad = (p90 * math.atanh(0.9) - p10 * math.atanh(0.1)) / (p10 - p90)
    assert abs(math.tanh(alpha * p10 + beta_bad) - 0.1) > 1e-3


@checklist(2, "cam-sum vs logit consistency: raw >= 0.999, common r >= 0.95 / rho >= 0.99, "
              "individual strictly lower")
def test_02_consistency(train_archive, train_stats):
    for scheme in ("grad_cam", "xgrad_cam", "pixelwise_grad"):
        sums, logits = cam_sums_and_logits(train_archive, scheme, 0, "raw")
        assert ev.pearson(sums, logits) >= 0.999, scheme
    # per-class analysis: pooling classes mixes two affine families with
    # different biases and destroys the monotone cam-sum/logit relation
    stats1 = ds.collect_stats(train_archive, "grad_cam", 1)
    sums_c, logits_c = cam_sums_and_logits(
        train_archive, "grad_cam", 1, "common", stats=stats1, target=(32, 32)
    )
    r = ev.pearson(sums_c, logits_c)
    rho = ev.spearman(sums_c, logits_c)
    assert r >= 0.95, f"common-scale pearson {r}"
    assert rho >= 0.99, f"common-scale spearman {rho}"
    sums_i, logits_i = cam_sums_and_logits(train_archive, "grad_cam", 1, "individual")
    assert abs(ev.pearson(sums_i, logits_i)) < r, "individual scale must correlate worse"


@checklist(3, "raw map sums reproduce logit minus bias within 1e-4 relative (2000 samples)")
def test_03_decomposition_identity(train_archive):
    manifest = ar.read_manifest(train_archive)
    bias = manifest.head.bias
    for scheme in ("grad_cam", "xgrad_cam", "pixelwise_grad"):
        by_id = {rec.sample_id: rec for rec in ar.iter_samples(train_archive)}
        count = 0
        for res in cp.generate(train_archive, scheme, 0, "raw"):
            expected = float(by_id[res.sample_id].logits[0]) - bias[0]
            assert res.sum == pytest.approx(expected, rel=1e-4, abs=1e-6), scheme
            count += 1
        assert count == 2000


@checklist(4, "single-pass IM equals per-class IM on the matching-label subset (both heads)")
def test_04_im_equivalence(train_dataset, train_archive, model, tmp_path_factory):
    def subset_archive(src, gt, dst):
        manifest = ar.read_manifest(src)
        recs = list(ar.iter_samples(src, true_class=gt))
        return ar.write_archive(manifest, recs, dst)

    root = tmp_path_factory.mktemp("im_eq")
    small = rn.gen_dataset(10, 200)
    flat_model = rn.train(small, "flatten_linear", epochs=1, lr=0.3, seed=0)
    flat_archive = rn.dump_archive(flat_model, small, root / "flat", grads="all")
    for archive in (train_archive, flat_archive):
        unified = im.build_im_unified(archive, "grad_cam")
        for c in (0, 1):
            sub = subset_archive(archive, c, root / f"sub_{archive.name}_{c}")
            col = im.build_im_per_class(sub, "grad_cam", c)
            np.testing.assert_allclose(unified.column(c), col, rtol=1e-9, atol=1e-12)


@checklist(5, "principal features carry the accuracy: top 25% within 0.05 of full, "
              "complement <= 0.65")
def test_05_principal_features(train_archive, test_archive):
    unified = im.build_im_unified(train_archive, "grad_cam")
    mask = im.threshold_im(unified, "top_pct", k=25, im_id="train")
    report = ev.masked_accuracy(test_archive, mask)
    assert report.n == 500
    assert report.accuracy_principal >= report.accuracy_all - 0.05, report.to_json()
    assert report.accuracy_nonprincipal <= 0.65, report.to_json()


@checklist(6, "masked common-scale CAMs: all-ones mask is byte-identical to unmasked; "
              "single-feature mask isolates that feature")
def test_06_fs_identity(train_archive, train_stats, tmp_path):
    kwargs = dict(stats=train_stats, target_dims=(32, 32))
    plain = list(cp.generate(train_archive, "grad_cam", "gt", "common", **kwargs))[:50]
    ones = list(cp.generate(train_archive, "grad_cam", "gt", "common",
                            mask=np.ones(16), mask_provenance={"rule": "explicit"},
                            **kwargs))[:50]
    for a, b in zip(plain, ones):
        pa, pb = tmp_path / "a.camf32", tmp_path / "b.camf32"
        cp.write_cam(a, pa)
        cp.write_cam(b, pb)
        assert pa.read_bytes() == pb.read_bytes()

    feature = 7
    single = np.zeros(16)
    single[feature] = 1.0
    masked = next(cp.generate(train_archive, "grad_cam", "gt", "common", mask=single, **kwargs))
    rec = next(ar.iter_samples(train_archive))
    import ifa.schemes as sc

    stack = sc.weighted_features("grad_cam", rec.features, rec.grads[rec.true_class])
    one_map = stack.maps[feature].reshape(8, 8)
    params = cp.sigma_from_percentiles(train_stats.p10, train_stats.p90)
    expected = cp.apply_sigma(cp.resize_spatial(one_map, 32, 32), params)
    np.testing.assert_allclose(masked.map, expected, atol=1e-10)


@checklist(7, "analytic gradients match central finite differences within 1e-3 relative")
def test_07_gradient_correctness(model, train_dataset):
    x, y = train_dataset.images[:4], train_dataset.labels[:4]
    _, grads, _ = rn.loss_and_grads(model, x, y)
    rng = np.random.default_rng(1)
    for name, param in model.param_items():
        for _ in range(3):
            coord = tuple(int(rng.integers(0, s)) for s in param.shape)
            fds = []
            for h in (1e-5, 2e-5):
                orig = param[coord]
                param[coord] = orig + h
                lp, _, _ = rn.loss_and_grads(model, x, y)
                param[coord] = orig - h
                lm, _, _ = rn.loss_and_grads(model, x, y)
                param[coord] = orig
                fds.append((lp - lm) / (2 * h))
            if abs(fds[0] - fds[1]) > 1e-4 * max(1.0, abs(fds[0])):
                continue  # FD straddles a ReLU/max-pool kink; estimate unusable
            assert grads[name][coord] == pytest.approx(fds[0], rel=1e-3, abs=1e-7), name

    # target-activation gradient: FD through the (affine) head replay
    image = train_dataset.images[0]
    feats, logits = rn.forward(model, image)
    g = rn.grad_target(model, image, 1)
    head = model.head_spec()
    rng2 = np.random.default_rng(2)
    for _ in range(10):
        coord = tuple(int(rng2.integers(0, s)) for s in feats.shape)
        h = 1e-4
        bumped = feats.copy()
        bumped[coord] += h
        lp = ev.replay_logits(head, bumped.reshape(16, -1), np.ones(16))[1]
        bumped[coord] -= 2 * h
        lm = ev.replay_logits(head, bumped.reshape(16, -1), np.ones(16))[1]
        assert g[coord] == pytest.approx((lp - lm) / (2 * h), rel=1e-6, abs=1e-9)


@checklist(8, "sketch percentiles within 1% of exact on 1e6 values; exact mode is "
              "shard- and permutation-invariant")
def test_08_percentile_oracle():
    rng = np.random.default_rng(3)
    mixtures = {
        "uniform": rng.uniform(0, 1, size=1_000_000),
        "normal": rng.normal(size=1_000_000),
        "heavy": np.concatenate([
            rng.normal(size=900_000),
            rng.standard_cauchy(size=100_000),
        ]),
    }
    for name, values in mixtures.items():
        exact = ds.StatsAccumulator(0, "grad_cam")
        exact.add_values(values)
        exact_stats = exact.finalize()
        sketch = ds.StatsAccumulator(0, "grad_cam", mode="sketch")
        sketch.add_values(values)
        sketch_stats = sketch.finalize()
        iqr = exact_stats.percentiles[90] - exact_stats.percentiles[10]
        for p in (10, 90):
            err = abs(sketch_stats.percentiles[p] - exact_stats.percentiles[p])
            tol = 0.01 * max(abs(exact_stats.percentiles[p]), iqr)
            assert err <= tol, f"{name} P{p} off by {err} (tol {tol})"

    values = rng.normal(size=50_000)
    docs = []
    for workers in range(1, 9):
        shards = [ds.StatsAccumulator(0, "grad_cam") for _ in range(workers)]
        for i in range(0, values.size, 640):
            shards[(i // 640) % workers].add_values(values[i : i + 640])
        acc = shards[0]
        for other in shards[1:]:
            acc.merge(other)
        docs.append(acc.finalize().to_json())
    assert all(doc == docs[0] for doc in docs)
    perm = ds.StatsAccumulator(0, "grad_cam")
    perm.add_values(values[np.random.default_rng(4).permutation(values.size)])
    assert perm.finalize().to_json() == docs[0]


@checklist(9, "increase/drop summary reproduces hand-computed tables exactly")
def test_09_inc_drop_formulas():
    report = ev.collect_inc_drop([(0.8, 0.6)])
    assert report.average_drop == pytest.approx(25.0, rel=1e-12)
    assert report.average_increase == 0.0
    report2 = ev.collect_inc_drop([(0.8, 0.6), (0.5, 0.7), (0.4, 0.4)])
    assert report2.average_increase == pytest.approx(100.0 / 3.0)
    assert report2.average_drop == pytest.approx(100.0 * (0.25 + 0.0 + 0.0) / 3.0)
    report3 = ev.collect_inc_drop([(0.9, 0.0), (0.1, 1.0)])
    assert report3.average_drop == pytest.approx(50.0)
    assert report3.average_increase == pytest.approx(50.0)


@checklist(10, "PNG rendering is byte-identical across repeated runs")
def test_10_render_goldens(train_archive, train_stats):
    def render_all():
        out = []
        results = cp.generate(train_archive, "grad_cam", "gt", "common",
                              stats=train_stats, target_dims=(32, 32))
        for res, _ in zip(results, range(25)):
            out.append(rd.render_cam(res))
        return out

    first = render_all()
    second = render_all()
    assert first == second
    assert all(png[:8] == b"\x89PNG\r\n\x1a\n" for png in first)
