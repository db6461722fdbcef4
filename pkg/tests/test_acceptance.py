"""Acceptance criteria, one test per criterion, each printing a PASS line.

The heavyweight end-to-end criteria drive the real CLI over a synthetic
corpus; everything else is property checks against independent oracles at
the stated tolerances.
"""

import itertools
import json
import time

import numpy as np
import pytest

import oracles
from motiongait import autograd as ag
from motiongait import data
from motiongait import evaluation as ev
from motiongait import feature_extractor as fx
from motiongait import motion_excitation as me
from motiongait import network as net
from motiongait import train as tr
from motiongait import verification
from motiongait.cli import main


def announce(n, name, detail=""):
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {n}: {name} PASS{suffix}")


# -- 1: kernel oracle suite ----------------------------------------------------

def test_criterion_1_kernel_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1000)

    for trial in range(100):  # conv3d, random shape/stride/padding
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kd = tuple(int(rng.integers(1, 4)) for _ in range(3))
        stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
        padding = tuple(int(rng.integers(0, 2)) for _ in range(3))
        dims = tuple(
            int(rng.integers(max(1, k - 2 * p), 6))
            for k, p in zip(kd, padding)
        )
        x = rng.standard_normal((c_in, *dims))
        k = rng.standard_normal((c_out, c_in, *kd))
        b = rng.standard_normal(c_out)
        got = ag.conv3d(ag.tensor(x, dtype=np.float64),
                        ag.tensor(k, dtype=np.float64),
                        ag.tensor(b, dtype=np.float64), stride, padding).data
        want = oracles.conv3d_loops(x, k, b, stride, padding)
        assert np.allclose(got, want, rtol=1e-6, atol=1e-9)

    for trial in range(100):  # temporal aggregation layout
        c = int(rng.integers(1, 4))
        kt = int(rng.integers(2, 4))
        s = int(rng.integers(kt, 12))
        x = rng.standard_normal((c, s, 3, 3))
        k = rng.standard_normal((c, c, kt, 1, 1))
        b = rng.standard_normal(c)
        got = net.lta(ag.tensor(x, dtype=np.float64),
                      ag.tensor(k, dtype=np.float64),
                      ag.tensor(b, dtype=np.float64), stride_t=kt).data
        want = oracles.conv3d_loops(x, k, b, (kt, 1, 1), (0, 0, 0))
        assert np.allclose(got, want, rtol=1e-6, atol=1e-9)

    for trial in range(100):  # reductions
        shape = tuple(int(rng.integers(1, 6)) for _ in range(4))
        axis = int(rng.integers(0, 4))
        x = rng.standard_normal(shape)
        t = ag.tensor(x, dtype=np.float64)
        mean_got = ag.reduce_mean(t, axis).data
        mean_want = oracles.reduce_loops(x, "mean", axis)
        assert np.allclose(mean_got, mean_want, rtol=1e-10, atol=1e-12)
        assert np.array_equal(ag.reduce_max(t, axis).data,
                              oracles.reduce_loops(x, "max", axis))

    for trial in range(100):  # generalized-mean pooling
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)),
                 int(rng.integers(1, 6)))
        x = rng.random(shape) * 3
        p = float(rng.uniform(0.5, 32.0))
        got = ag.gem_pool(ag.tensor(x, dtype=np.float64), p).data
        assert np.allclose(got, oracles.gem_pool_formula(x, p), rtol=1e-6)

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"kernel oracle suite took {elapsed:.1f}s"
    announce(1, "kernel oracle suite vs naive loops", f"{elapsed:.1f}s")


# -- 2: gradient suite -----------------------------------------------------------

def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    results, ok = verification.run_suite(op_tolerance=1e-5, model_tolerance=1e-4)
    failures = [name for name, rep in results if not rep.passed]
    assert ok, f"gradient checks failed: {failures}"
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"
    announce(2, "finite-difference gradient suite",
             f"{len(results)} checks, {elapsed:.1f}s")


# -- 3: motion excitation laws -----------------------------------------------------

def test_criterion_3_motion_excitation_laws():
    rng = np.random.default_rng(3000)

    # no learnable state: the pass introduces no new gradient leaves
    x = ag.tensor(rng.standard_normal((1, 4, 2, 2)), dtype=np.float64,
                  requires_grad=True)
    out = me.mem_forward(x, 2)
    stack, seen, leaves = [out], set(), []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not node._parents and node.requires_grad:
            leaves.append(node)
        stack.extend(node._parents)
    assert leaves == [x]

    for s in range(1, 8):  # shape preservation over the clip-length grid
        for clip_len in (2, 3, 4, 5):
            xi = ag.tensor(rng.standard_normal((2, s, 4, 3)), dtype=np.float64)
            assert me.mem_forward(xi, clip_len).shape == xi.shape

    const = ag.tensor(np.full((2, 6, 4, 3), 0.3), dtype=np.float64)
    assert np.allclose(me.mem_forward(const, 2).data, const.data + 0.5,
                       atol=1e-6)

    for trial in range(1000):  # bounded residual
        s = int(rng.integers(1, 8))
        xi = ag.tensor(rng.standard_normal((1, s, 3, 2)), dtype=np.float64)
        res = me.mem_forward(xi, int(rng.integers(1, 6))).data - xi.data
        assert np.all(res > 0) and np.all(res < 1)

    for trial in range(100):  # within-clip permutation equivariance
        s = int(rng.integers(2, 9))
        clip_len = int(rng.integers(2, 5))
        part = me.partition_clips(s, clip_len)
        j = int(rng.integers(0, part.num_clips))
        a, b = part.boundaries[j]
        perm = np.arange(s)
        perm[a:b] = a + rng.permutation(b - a)
        xi = rng.standard_normal((2, s, 3, 2))
        base = me.mem_forward(ag.tensor(xi, dtype=np.float64), clip_len).data
        shuffled = me.mem_forward(ag.tensor(xi[:, perm], dtype=np.float64),
                                  clip_len).data
        assert np.allclose(shuffled, base[:, perm], rtol=1e-12, atol=1e-12)

    announce(3, "motion excitation laws",
             "zero params, shapes, constant, bounds, equivariance")


# -- 4: fine feature extractor laws --------------------------------------------------

def test_criterion_4_extractor_laws():
    rng = np.random.default_rng(4000)

    for trial in range(50):  # locality probe
        n = int(rng.integers(2, 5))
        band = int(rng.integers(1, 4))
        h = n * band
        c = int(rng.integers(1, 3))
        params = fx.init_part_conv_params(c, int(rng.integers(1, 3)), n,
                                          fx.Fusion.ADD,
                                          np.random.default_rng(4100 + trial),
                                          np.float64)
        x = rng.standard_normal((c, 3, h, 4))
        base = fx.ffe_local(ag.tensor(x, dtype=np.float64), params).data
        k = int(rng.integers(0, n))
        bumped = x.copy()
        bumped[:, :, k * band : (k + 1) * band, :] += rng.standard_normal(
            (c, 3, band, 4))
        out = fx.ffe_local(ag.tensor(bumped, dtype=np.float64), params).data
        for j in range(n):
            rows = slice(j * band, (j + 1) * band)
            if j != k:
                assert np.array_equal(out[:, :, rows], base[:, :, rows])

    x = ag.tensor(rng.standard_normal((2, 4, 8, 6)), dtype=np.float64)
    add_params = fx.init_part_conv_params(2, 5, 2, fx.Fusion.ADD,
                                          np.random.default_rng(4200),
                                          np.float64)
    cat_params = fx.init_part_conv_params(2, 5, 2, fx.Fusion.CONCAT_H,
                                          np.random.default_rng(4300),
                                          np.float64)
    assert fx.mge_forward(x, 2, add_params).shape == (5, 4, 8, 6)
    assert fx.mge_forward(x, 2, cat_params).shape == (5, 4, 16, 6)

    single = fx.init_part_conv_params(2, 3, 1, fx.Fusion.ADD,
                                      np.random.default_rng(4400), np.float64)
    single.part_kernels[0] = single.global_kernel
    single.part_biases[0] = single.global_bias
    assert np.array_equal(fx.ffe_local(x, single).data,
                          fx.ffe_global(x, single).data)

    announce(4, "extractor laws", "locality x50, height algebra, degeneracy")


# -- 5: triplet and ranking oracles ------------------------------------------------

def test_criterion_5_triplet_and_ranking_oracles():
    rng = np.random.default_rng(5000)

    layouts = [(p, k) for p in range(2, 9) for k in range(2, 9) if p * k <= 16]
    for p, k in layouts:
        for draw in range(3):
            emb = rng.standard_normal((p * k, 4))
            labels = np.repeat(np.arange(p), k)
            got = tr.batch_all_triplet(
                ag.tensor(emb, dtype=np.float64), labels, 0.2).item()
            want, _ = oracles.triplet_enumeration(emb, labels, 0.2)
            assert got == pytest.approx(want, abs=1e-6), (p, k)

    # rank-1 vs brute force on a 180-record instance
    views = [0, 90]
    subjects = [f"s{i:02d}" for i in range(9)]
    records = []
    for s in subjects:
        center = rng.standard_normal(8) * 2
        for cond in ("nm-01", "nm-02", "nm-03", "nm-04", "nm-05", "nm-06",
                     "bg-01", "bg-02", "cl-01", "cl-02"):
            for v in views:
                records.append(ev.EmbeddingRecord(
                    s, cond, v,
                    (center + rng.standard_normal(8) * 1.5).astype(np.float32)))
    assert len(records) == 180
    gallery, probes = ev.build_gallery_probe(records)
    for group_name, group in probes.items():
        matrix = ev.rank1_matrix(gallery, group, views)
        for i, vp in enumerate(views):
            for j, vg in enumerate(views):
                want = oracles.rank1_bruteforce(
                    [(r.subject, r.descriptor) for r in gallery
                     if r.view == vg],
                    [(r.subject, r.descriptor) for r in group
                     if r.view == vp])
                assert matrix[i, j] == want

    # chance level: random descriptors against G subjects per view
    g_subjects = 4
    trials = 2500
    gallery = [ev.EmbeddingRecord(f"g{i}", "nm-01", 0,
                                  rng.standard_normal(8).astype(np.float32))
               for i in range(g_subjects)]
    probe_list = [
        ev.EmbeddingRecord(f"g{int(rng.integers(0, g_subjects))}", "nm-05", 0,
                           rng.standard_normal(8).astype(np.float32))
        for _ in range(trials)
    ]
    rate = ev.rank1_matrix(gallery, probe_list, [0])[0, 0]
    assert abs(rate - 100.0 / g_subjects) <= 5.0
    announce(5, "triplet/ranking oracles",
             f"{len(layouts)} batch layouts, 180-record exact, "
             f"chance {rate:.1f}% vs 25%")


# -- 6: toy overfit ---------------------------------------------------------------

def test_criterion_6_toy_overfit(tmp_path):
    t0 = time.perf_counter()
    ds = tmp_path / "toy_ds"
    run = tmp_path / "toy_run"
    assert main(["synth", "--out", str(ds), "--subjects", "8",
                 "--frames", "36", "--seed", "71"]) == 0
    assert main(["train", "--data", str(ds), "--out", str(run),
                 "--profile", "desk", "--seed", "71"]) == 0
    emb = run / "train.mgemb"
    assert main(["embed", "--data", str(ds),
                 "--checkpoint", str(run / "checkpoint.mgck"),
                 "--out", str(emb), "--split", "train"]) == 0
    rep = run / "report"
    assert main(["eval", "--embeddings", str(emb), "--out", str(rep)]) == 0

    elapsed = time.perf_counter() - t0
    assert elapsed < 900.0, f"toy pipeline took {elapsed:.0f}s, budget 900s"

    log = tr.read_loss_log(run / "losses.csv")
    iterations = log["iteration"]
    assert iterations[-1] <= 2000
    joint_at_10 = float(log["joint"][iterations == 10][0])
    joint_final = float(log["joint"][-1])
    ratio = joint_at_10 / joint_final
    assert ratio >= 10.0, (
        f"joint loss fell only {ratio:.1f}x "
        f"({joint_at_10:.4f} -> {joint_final:.4f})"
    )

    payload = json.loads((rep / "report.json").read_text())
    nm_mean = payload["conditions"]["NM"]["mean"]
    assert nm_mean >= 95.0, f"NM rank-1 mean {nm_mean:.1f}% < 95%"
    announce(6, "toy overfit",
             f"NM rank-1 {nm_mean:.1f}%, loss x{ratio:.0f} down, "
             f"{elapsed:.0f}s")


# -- 7: ablation plumbing -----------------------------------------------------------

ABLATION_OVERRIDES = [
    "--set", "train.iterations=20",
    "--set", "train.subjects_per_batch=2",
    "--set", "train.samples_per_subject=2",
    "--set", "train.checkpoint_every=20",
    "--set", "data.train_subjects=4",
]


def run_variant(ds, out, flags):
    assert main(["train", "--data", str(ds), "--out", str(out), "--seed", "7"]
                + ABLATION_OVERRIDES + flags) == 0
    emb = out / "emb.mgemb"
    assert main(["embed", "--data", str(ds),
                 "--checkpoint", str(out / "checkpoint.mgck"),
                 "--out", str(emb), "--split", "train",
                 "--set", "data.train_subjects=4"]) == 0
    rep = out / "report"
    assert main(["eval", "--embeddings", str(emb), "--out", str(rep),
                 "--no-figures"]) == 0
    records = ev.read_embeddings(emb)
    payload = json.loads((rep / "report.json").read_text())
    return records[0].descriptor.shape, payload


def test_criterion_7_ablation_plumbing(tmp_path):
    ds = tmp_path / "ds"
    assert main(["synth", "--out", str(ds), "--subjects", "4", "--frames",
                 "12", "--views", "0,90,180", "--seed", "7"]) == 0
    shapes = {}
    reports = {}
    for name, flags in (
        ("full", []),
        ("no_mem", ["--no-mem"]),
        ("no_local", ["--no-ffe-local"]),
        ("baseline", ["--no-mem", "--no-ffe-local"]),
    ):
        shapes[name], reports[name] = run_variant(ds, tmp_path / name, flags)
    assert len(set(shapes.values())) == 1, f"descriptor shapes differ: {shapes}"
    for name, payload in reports.items():
        assert set(payload["conditions"]) == {"NM", "BG", "CL"}, name
        for cond in payload["conditions"].values():
            assert cond["mean"] is not None
    announce(7, "ablation plumbing",
             f"4 variants, shape {shapes['full']}, reports comparable")


# -- 8: pipeline determinism ---------------------------------------------------------

DETERMINISM_OVERRIDES = [
    "--set", "train.iterations=25",
    "--set", "train.subjects_per_batch=2",
    "--set", "train.samples_per_subject=2",
    "--set", "train.checkpoint_every=25",
    "--set", "data.train_subjects=4",
]


def run_pipeline(base, seed=13):
    ds = base / "ds"
    run = base / "run"
    assert main(["synth", "--out", str(ds), "--subjects", "4", "--frames",
                 "12", "--views", "0,90", "--seed", str(seed)]) == 0
    assert main(["train", "--data", str(ds), "--out", str(run),
                 "--seed", str(seed)] + DETERMINISM_OVERRIDES) == 0
    emb = base / "emb.mgemb"
    assert main(["embed", "--data", str(ds),
                 "--checkpoint", str(run / "checkpoint.mgck"),
                 "--out", str(emb), "--split", "train",
                 "--set", "data.train_subjects=4"]) == 0
    rep = base / "report"
    assert main(["eval", "--embeddings", str(emb), "--out", str(rep),
                 "--no-figures"]) == 0
    return (emb.read_bytes(), (rep / "report.json").read_bytes(),
            (ds / "manifest.json").read_bytes())


def test_criterion_8_pipeline_determinism(tmp_path):
    first = run_pipeline(tmp_path / "a")
    second = run_pipeline(tmp_path / "b")
    assert first[2] == second[2], "dataset manifests differ"
    assert first[0] == second[0], "embedding files differ"
    assert first[1] == second[1], "eval reports differ"
    announce(8, "pipeline determinism",
             "bit-identical embeddings and reports across two runs")
