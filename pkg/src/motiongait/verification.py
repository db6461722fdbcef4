"""Finite-difference verification harness: one canned check per
differentiable op plus a micro end-to-end model, all in float64. Backs the
`gradcheck` CLI subcommand and the acceptance gradient suite.
"""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from . import motion_excitation as me
from . import network as net
from . import train as tr
from .autograd import GradCheckReport
from .feature_extractor import Fusion, init_part_conv_params, mge_forward


def _leaf(shape, seed, scale=1.0, shift=0.0):
    rng = np.random.default_rng(seed)
    return ag.tensor(rng.standard_normal(shape) * scale + shift,
                     dtype=np.float64, requires_grad=True)


def op_checks(tolerance: float = 1e-5) -> list[tuple[str, GradCheckReport]]:
    """Run the per-op finite-difference suite; returns (name, report) pairs."""
    checks: list[tuple[str, GradCheckReport]] = []

    def run(name, fn, inputs):
        checks.append((name, ag.grad_check(fn, inputs, tolerance=tolerance)))

    run("add", ag.add, [_leaf((3, 4), 0), _leaf((3, 4), 1)])
    run("sub", ag.sub, [_leaf((3, 4), 2), _leaf((3, 4), 3)])
    run("mul", ag.mul, [_leaf((3, 4), 4), _leaf((3, 4), 5)])
    run("add_scalar", lambda a: ag.add_scalar(a, 0.7), [_leaf((3, 3), 6)])
    run("mul_scalar", lambda a: ag.mul_scalar(a, -1.3), [_leaf((3, 3), 7)])
    abs_in = _leaf((3, 3), 8)
    abs_in.data += np.sign(abs_in.data) * 0.5
    run("abs", ag.absolute, [abs_in])
    run("sigmoid", ag.sigmoid, [_leaf((3, 3), 9)])
    run("reduce_mean", lambda a: ag.reduce_mean(a, axis=1), [_leaf((2, 4, 3), 10)])
    max_vals = np.random.default_rng(11).permutation(24).reshape(2, 4, 3) / 5.0
    run("reduce_max", lambda a: ag.reduce_max(a, axis=1),
        [ag.tensor(max_vals, dtype=np.float64, requires_grad=True)])
    run("sum_all", ag.sum_all, [_leaf((4, 2), 12)])
    run("split_h", lambda a: ag.concat_h(list(reversed(ag.split_h(a, 2)))),
        [_leaf((2, 2, 4, 3), 13)])
    run("concat_h", lambda a, b: ag.concat_h([a, b]),
        [_leaf((1, 2, 2, 3), 14), _leaf((1, 2, 3, 3), 15)])
    run("stack", lambda a, b: ag.stack([a, b]), [_leaf((2, 3), 16), _leaf((2, 3), 17)])
    run("reshape", lambda a: ag.reshape(a, (6, 2)), [_leaf((2, 3, 2), 18)])
    run("swap_last2", ag.swap_last2, [_leaf((2, 3, 4), 19)])
    run("matmul", ag.matmul, [_leaf((3, 4), 20), _leaf((4, 2), 21)])
    run("strip_matmul", ag.strip_matmul,
        [_leaf((2, 3, 4), 22), _leaf((3, 4, 2), 23)])
    run("conv3d_same", lambda x, k, b: ag.conv3d(x, k, b),
        [_leaf((2, 3, 4, 4), 24), _leaf((2, 2, 3, 3, 3), 25), _leaf((2,), 26)])
    run("conv3d_strided",
        lambda x, k, b: ag.conv3d(x, k, b, stride=(2, 1, 2), padding=(0, 1, 0)),
        [_leaf((2, 5, 3, 5), 27), _leaf((2, 2, 2, 3, 2), 28), _leaf((2,), 29)])
    run("conv3d_temporal",
        lambda x, k, b: ag.conv3d(x, k, b, stride=(3, 1, 1), padding=(0, 0, 0)),
        [_leaf((2, 7, 3, 3), 30), _leaf((2, 2, 3, 1, 1), 31), _leaf((2,), 32)])
    gem_x = _leaf((2, 3, 4), 33, scale=0.8, shift=1.5)
    gem_p = ag.tensor(np.array(3.3), dtype=np.float64, requires_grad=True)
    run("gem_pool", lambda a, q: ag.gem_pool(a, q), [gem_x, gem_p])
    bn_state = ag.BatchNormState.create(3, dtype=np.float64)
    run("batch_norm_train",
        lambda x, g, b: ag.batch_norm(x, g, b, bn_state, True),
        [_leaf((6, 3), 34), _leaf((3,), 35, shift=1.0), _leaf((3,), 36)])
    eval_state = ag.BatchNormState.create(3, dtype=np.float64)
    eval_state.running_mean = np.array([0.2, -0.1, 0.4])
    eval_state.running_var = np.array([1.2, 0.8, 1.5])
    run("batch_norm_eval",
        lambda x, g, b: ag.batch_norm(x, g, b, eval_state, False),
        [_leaf((4, 3), 37), _leaf((3,), 38, shift=1.0), _leaf((3,), 39)])
    labels = np.array([0, 2, 1, 2])
    run("softmax_cross_entropy",
        lambda z: ag.softmax_cross_entropy(z, labels), [_leaf((4, 3), 40)])
    run("motion_excitation",
        lambda a: me.mem_forward(a, clip_len=2), [_leaf((2, 5, 3, 2), 41)])
    block = init_part_conv_params(1, 2, 2, Fusion.CONCAT_H,
                                  np.random.default_rng(42), np.float64)
    run("mge_block",
        lambda x, *ps: mge_forward(x, 2, block),
        [_leaf((1, 4, 4, 2), 43), block.global_kernel, block.global_bias,
         *block.part_kernels, *block.part_biases])
    trip_labels = np.array([0, 0, 1, 1, 2, 2])
    run("batch_all_triplet",
        lambda e: tr.batch_all_triplet(e, trip_labels, 0.2),
        [_leaf((6, 2, 3), 44)])
    return checks


MICRO_CONFIG = net.NetworkConfig(
    stage_channels=(2, 2, 2),
    num_mge_blocks=2,
    clip_len=2,
    num_parts=2,
    embed_dim=4,
    num_classes=2,
    input_height=8,
    input_width=8,
)


def end_to_end_check(tolerance: float = 1e-4) -> GradCheckReport:
    """Joint loss of a micro model, finite-differenced over every parameter."""
    params = net.init_params(MICRO_CONFIG, seed=100, dtype=np.float64)
    rng = np.random.default_rng(101)
    samples = [ag.tensor(rng.random((1, 6, 8, 8)), dtype=np.float64)
               for _ in range(4)]
    labels = np.array([0, 0, 1, 1])
    named = params.named()
    tensors = list(named.values())

    def fn(*args):
        result = net.forward(samples, MICRO_CONFIG, params, mode="train")
        joint, _, _ = tr.joint_loss(result.embeddings, result.logits,
                                    labels, margin=0.2)
        return joint

    return ag.grad_check(fn, tensors, tolerance=tolerance)


def run_suite(op_tolerance: float = 1e-5, model_tolerance: float = 1e-4):
    """Full verification pass; returns (results, all_passed)."""
    results = op_checks(op_tolerance)
    results.append(("end_to_end_micro_model", end_to_end_check(model_tolerance)))
    return results, all(report.passed for _, report in results)
