"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. Criteria use the
tolerances stated below; reference totals for the bundled architectures come
from their published statistics.

Known red: criterion 3's compact-translation cross-check. The bundled
compact translation architecture ends in 216- and 88-wide stride-2 transposed
convs; charged at output resolution (the convention that criterion 2
validates within 10%), those two layers alone cost ~15.3 GFLOPs at 256x256,
so no cost model can reproduce both the 54.17 GFLOPs reference of criterion 2
and the 6.39 GFLOPs reference here. See the analysis in the repository notes.
The test asserts the stated bound anyway and fails honestly.
"""

import math
import time

import pytest
import torch

from slimgan import engine
from slimgan.budget import derived_flops, expected_flops_alpha, expected_flops_gamma, op_flops
from slimgan.checkpoint import load_checkpoint, save_checkpoint
from slimgan.config import toy_translation_config
from slimgan.distill import DistillConfig, FeaturePyramid, distance
from slimgan.fixtures_io import load_fixture
from slimgan.metrics import psnr
from slimgan.quantize import dequantize, quantize_model, quantize_tensor, simulate_quantized_forward
from slimgan.schema import export_architecture, import_architecture
from slimgan.search_space import (
    ConvOp,
    LayerSpec,
    OperatorKind,
    SupernetSpec,
    max_architecture,
    spec_for_architecture,
)
from slimgan.supernet import DerivedGenerator, GeneratorSupernet, SuperConv2d, sample_width
from slimgan.toy import make_toy_task

from test_budget import oracle_op
from test_schema import random_architecture

ACCEPTANCE_SEED = 13


def report(number: int, description: str, ok: bool, detail: str = "") -> None:
    print(f"\n[criterion {number:02d}] {'PASS' if ok else 'FAIL'} {description} {detail}")
    assert ok, f"criterion {number}: {description} {detail}"


def toy_preset(tmp_path, **overrides):
    out_dir = overrides.pop("out_dir", str(tmp_path / "run"))
    return toy_translation_config(out_dir, seed=ACCEPTANCE_SEED, **overrides)


def test_criterion_01_flops_oracle_equivalence():
    start = time.time()
    rng = torch.Generator().manual_seed(1001)

    def draw(lo, hi):
        return int(torch.randint(lo, hi + 1, (1,), generator=rng))

    kinds = list(OperatorKind)
    mismatches = 0
    for _ in range(200):
        kind = kinds[draw(0, 3)]
        c_in, c_out = draw(1, 16), draw(1, 16)
        h, w = draw(1, 16), draw(1, 16)
        stride = draw(1, 2)
        if op_flops(kind, c_in, c_out, h, w, stride) != oracle_op(kind, c_in, c_out, h, w, stride):
            mismatches += 1
    elapsed = time.time() - start
    report(
        1,
        "analytic cost equals brute-force MAC count on 200 random layers",
        mismatches == 0 and elapsed < 10,
        f"(mismatches={mismatches}, {elapsed:.1f}s)",
    )


def test_criterion_02_full_size_translation_cross_check():
    start = time.time()
    arch = load_fixture("cyclegan_base")
    report_obj = derived_flops(spec_for_architecture(arch), arch, 256, 256)
    elapsed = time.time() - start
    ok = abs(report_obj.gflops - 54.17) / 54.17 <= 0.10 and elapsed < 1
    report(
        2,
        "full-size translation generator at 256x256 within 10% of 54.17 GFLOPs",
        ok,
        f"(measured {report_obj.gflops:.2f} GFLOPs, {elapsed:.2f}s)",
    )


def test_criterion_03a_compact_translation_cross_check():
    arch = load_fixture("horse2zebra")
    report_obj = derived_flops(spec_for_architecture(arch), arch, 256, 256)
    ok = abs(report_obj.gflops - 6.39) / 6.39 <= 0.20
    report(
        3,
        "compact translation generator at 256x256 within 20% of 6.39 GFLOPs"
        " [known unattainable: transposed-conv header costs exceed the"
        " reference under the convention criterion 2 pins]",
        ok,
        f"(measured {report_obj.gflops:.2f} GFLOPs)",
    )


def test_criterion_03b_compact_sr_cross_check():
    start = time.time()
    arch = load_fixture("sr_visual")
    spec = spec_for_architecture(arch)
    reference_256 = 108.6  # GFLOPs at 256x256 input, 4x scale
    measured_64 = derived_flops(spec, arch, 64, 64).gflops
    measured_128 = derived_flops(spec, arch, 128, 128).gflops
    ok_64 = abs(measured_64 - reference_256 / 16) / (reference_256 / 16) <= 0.25
    ok_128 = abs(measured_128 - reference_256 / 4) / (reference_256 / 4) <= 0.25
    elapsed = time.time() - start
    report(
        3,
        "compact SR generator within 25% of the area-scaled 108.6 GFLOPs reference"
        " (6.79 at 64x64, 27.2 at 128x128)",
        ok_64 and ok_128 and elapsed < 1,
        f"(measured {measured_64:.2f} at 64x64, {measured_128:.2f} at 128x128)",
    )


def _three_layer_spec() -> SupernetSpec:
    return SupernetSpec(
        task="translation",
        layers=(
            LayerSpec("stem0", "stem", ConvOp(3), max_width=24, activation="relu"),
            LayerSpec("b1", "body", max_width=24, activation="relu"),
            LayerSpec("b2", "body", max_width=24, activation="relu"),
            LayerSpec("b3", "body", max_width=24, activation="relu"),
            LayerSpec("header3", "header", ConvOp(3), width=3, activation="tanh"),
        ),
    )


def test_criterion_04_budget_gradients():
    start = time.time()
    spec = _three_layer_spec()
    rng = torch.Generator().manual_seed(4)
    alpha = {
        l.id: torch.randn(4, generator=rng, dtype=torch.float64, requires_grad=True)
        for l in spec.searchable_op_layers()
    }
    gamma = {
        l.id: torch.randn(len(l.width_candidates()), generator=rng, dtype=torch.float64, requires_grad=True)
        for l in spec.searchable_width_layers()
    }
    eps = 1e-4
    worst = 0.0

    def check(fn, logits_map):
        nonlocal worst
        value = fn(spec, alpha, gamma, 12, 12)
        grads = torch.autograd.grad(value, list(logits_map.values()))
        for (lid, logits), grad in zip(logits_map.items(), grads):
            for i in range(logits.numel()):
                with torch.no_grad():
                    logits[i] += eps
                    up = float(fn(spec, alpha, gamma, 12, 12))
                    logits[i] -= 2 * eps
                    down = float(fn(spec, alpha, gamma, 12, 12))
                    logits[i] += eps
                fd = (up - down) / (2 * eps)
                scale = max(abs(fd), abs(float(grad[i])), 1e-12)
                worst = max(worst, abs(float(grad[i]) - fd) / scale)

    check(expected_flops_alpha, alpha)
    check(expected_flops_gamma, gamma)

    cross = 0.0
    fa = expected_flops_alpha(spec, alpha, gamma, 12, 12)
    for g in torch.autograd.grad(fa, list(gamma.values()), allow_unused=True):
        if g is not None:
            cross = max(cross, float(g.abs().max()))
    fg = expected_flops_gamma(spec, alpha, gamma, 12, 12)
    for g in torch.autograd.grad(fg, list(alpha.values()), allow_unused=True):
        if g is not None:
            cross = max(cross, float(g.abs().max()))
    elapsed = time.time() - start
    report(
        4,
        "budget gradients match finite differences (1e-4 rel); cross-gradients below 1e-8",
        worst <= 1e-4 and cross <= 1e-8 and elapsed < 30,
        f"(worst rel err {worst:.2e}, cross {cross:.2e}, {elapsed:.1f}s)",
    )


def test_criterion_05_gumbel_statistics():
    start = time.time()
    vectors = [
        torch.zeros(5),
        torch.tensor([1.0, 0.0, -1.0, 0.5, -0.5]),
        torch.tensor([2.0, -2.0, 0.0, 1.0, -1.0]),
    ]
    n = 10_000
    ok = True
    details = []
    generator = torch.Generator().manual_seed(5)
    for gamma in vectors:
        probs = torch.softmax(gamma, dim=-1)
        counts = torch.zeros(5)
        for _ in range(n):
            counts[sample_width(gamma, generator=generator).index] += 1
        freq = counts / n
        for p, f in zip(probs.tolist(), freq.tolist()):
            sigma = math.sqrt(p * (1 - p) / n)
            if abs(f - p) > 3 * sigma:
                ok = False
                details.append(f"p={p:.3f} f={f:.3f}")
    elapsed = time.time() - start
    report(
        5,
        "empirical width-selection frequencies match softmax within 3 sigma",
        ok and elapsed < 10,
        f"({'; '.join(details) or 'all categories in range'}, {elapsed:.1f}s)",
    )


def test_criterion_06_superkernel_consistency():
    start = time.time()
    torch.manual_seed(6)
    kernel = SuperConv2d(16, 16, 3)
    reference = torch.nn.Conv2d(16, 16, 3, padding=1)
    with torch.no_grad():
        reference.weight.copy_(kernel.weight)
        reference.bias.copy_(kernel.bias)
    x = torch.randn(2, 16, 8, 8)
    full_width_ok = torch.equal(kernel(x, 16), reference(x))

    before = kernel.weight.detach().clone()
    optimizer = torch.optim.SGD(kernel.parameters(), lr=0.3)
    half = torch.randn(1, 8, 8, 8)
    loss = kernel(half, 8).square().mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    trailing_ok = torch.equal(kernel.weight[8:], before[8:]) and torch.equal(
        kernel.weight[:8, 8:], before[:8, 8:]
    )
    leading_moved = not torch.equal(kernel.weight[:8, :8], before[:8, :8])
    elapsed = time.time() - start
    report(
        6,
        "full-width slice matches a standalone conv bitwise; half-width step"
        " leaves trailing channels untouched bitwise",
        full_width_ok and trailing_ok and leading_moved and elapsed < 10,
        f"({elapsed:.1f}s)",
    )


def test_criterion_07_distillation_gradient():
    start = time.time()
    rng = torch.Generator().manual_seed(7)
    student = torch.randn(1, 3, 4, 4, generator=rng, dtype=torch.float64, requires_grad=True)
    teacher = torch.randn(1, 3, 4, 4, generator=rng, dtype=torch.float64, requires_grad=True)
    extractor = FeaturePyramid((8,), seed=7).double()
    cfg = DistillConfig()
    loss = distance(student, teacher, cfg, extractor)
    loss.backward()
    teacher_grad_ok = teacher.grad is None

    grad = student.grad.reshape(-1)
    flat = student.detach().reshape(-1)
    eps = 1e-6
    worst = 0.0
    for i in range(flat.numel()):
        with torch.no_grad():
            flat[i] += eps
            up = float(distance(student.detach(), teacher.detach(), cfg, extractor))
            flat[i] -= 2 * eps
            down = float(distance(student.detach(), teacher.detach(), cfg, extractor))
            flat[i] += eps
        fd = (up - down) / (2 * eps)
        scale = max(abs(fd), abs(float(grad[i])), 1e-9)
        worst = max(worst, abs(float(grad[i]) - fd) / scale)
    elapsed = time.time() - start
    report(
        7,
        "distance gradient matches finite differences (1e-4 rel); teacher gets no gradient",
        worst <= 1e-4 and teacher_grad_ok and elapsed < 30,
        f"(worst rel err {worst:.2e}, {elapsed:.1f}s)",
    )


def test_criterion_08_lambda_controller_convergence(tmp_path):
    start = time.time()
    cfg = toy_preset(tmp_path)
    state = engine.build_state(cfg)
    max_total = derived_flops(state.spec, max_architecture(state.spec), 16, 16).total
    lower, upper = state.budget_cfg.flops_lower, state.budget_cfg.flops_upper
    assert lower == pytest.approx(0.4 * max_total) and upper == pytest.approx(0.6 * max_total)
    engine.run_pretrain(state)
    engine.run_search(state)

    final_total = state.lambda_ctl.history[-1][0]
    in_band = lower <= final_total <= upper

    doubling_ok = True
    lam = cfg.lambda0
    for total, new_lam in state.lambda_ctl.history:
        if total > upper:
            expected = min(lam * 2.0, state.budget_cfg.lambda_max)
            if new_lam != expected:
                doubling_ok = False
        lam = new_lam
    elapsed = time.time() - start
    report(
        8,
        "derived cost ends inside [40%, 60%] of the max architecture;"
        " the trade-off factor doubles at every overshoot check",
        in_band and doubling_ok and elapsed < 600,
        f"(final {final_total / max_total:.1%} of max, {elapsed:.0f}s)",
    )


def test_criterion_09_end_to_end_toy_distillation(tmp_path):
    start = time.time()
    cfg = toy_preset(tmp_path, out_dir=str(tmp_path / "run_a"))
    result_a = engine.run(cfg)
    curve = result_a.scratch_curve
    first = curve[0]
    final_smoothed = sum(curve[-5:]) / 5
    loss_ok = final_smoothed < 0.30 * first

    cfg_b = toy_preset(tmp_path, out_dir=str(tmp_path / "run_b"))
    result_b = engine.run(cfg_b)
    same_arch = result_a.architecture.layers == result_b.architecture.layers
    elapsed = time.time() - start
    report(
        9,
        "full pipeline completes; final smoothed scratch loss under 30% of epoch 1;"
        " rerun with the same seed derives the identical architecture",
        loss_ok and same_arch and elapsed < 900,
        f"(epoch1 {first:.4f} -> final {final_smoothed:.4f} = {final_smoothed / first:.1%}, "
        f"same arch {same_arch}, {elapsed:.0f}s)",
    )


def test_criterion_10_derivation_shift_invariance():
    spec = _three_layer_spec()
    rng = torch.Generator().manual_seed(10)
    ok = True
    for _ in range(100):
        alpha = {l.id: torch.randn(4, generator=rng) for l in spec.searchable_op_layers()}
        gamma = {
            l.id: torch.randn(len(l.width_candidates()), generator=rng)
            for l in spec.searchable_width_layers()
        }
        base = engine.derive(spec, alpha, gamma)
        shift_a = {k: v + float(torch.randn((), generator=rng)) for k, v in alpha.items()}
        shift_g = {k: v + float(torch.randn((), generator=rng)) for k, v in gamma.items()}
        if engine.derive(spec, shift_a, shift_g) != base:
            ok = False
            break
    report(10, "adding a constant to any layer's logits never changes the derived architecture", ok)


def test_criterion_11_quantization(tmp_path):
    task = make_toy_task("translation_toy", seed=11, size=64)
    spec = task.teacher.spec
    arch = task.teacher.architecture
    from slimgan.supernet import extract_student_weights

    bundle = extract_student_weights(task.teacher.module.net, arch)
    quantized, memory = quantize_model(bundle)
    ratio_ok = 0.25 <= memory.ratio <= 0.27

    torch.manual_seed(110)
    net = GeneratorSupernet(spec)
    student = DerivedGenerator(net, arch)
    from slimgan.supernet import load_student_weights

    load_student_weights(net, arch, bundle)
    x = task.images[:32]
    with torch.no_grad():
        float_out = student(x)
    quant_out = simulate_quantized_forward(student, quantized, x, bits=8, quantize_activations=False)
    rel_l2 = float((quant_out - float_out).norm() / float_out.norm())
    output_ok = rel_l2 < 0.05

    rng = torch.Generator().manual_seed(111)
    bound_ok = True
    for _ in range(10_000):
        scale_factor = float(torch.rand(1, generator=rng)) * 5 + 0.1
        x1 = torch.randn(32, generator=rng) * scale_factor
        qt = quantize_tensor(x1)
        err = (x1.double() - dequantize(qt, dtype=torch.float64)).abs().max()
        if float(err) > qt.scale / 2 + 1e-12:
            bound_ok = False
            break
    report(
        11,
        "quantized size in [25%, 27%] of float32; dequantized output within 5%"
        " relative L2; round-trip error at most scale/2 on 10k tensors",
        ratio_ok and output_ok and bound_ok,
        f"(ratio {memory.ratio:.4f}, rel L2 {rel_l2:.4f})",
    )


def test_criterion_12_psnr_closed_form():
    a = torch.zeros(3, 16, 16)
    unit = psnr(a, a + 1.0, peak=255.0)
    closed_form_ok = abs(unit - 48.13) <= 0.01
    cap_ok = psnr(a, a, peak=255.0) == 99.0
    report(
        12,
        "psnr(a, a+1) on the 0-255 scale equals 48.13 dB within 0.01; identical images hit the cap",
        closed_form_ok and cap_ok,
        f"(measured {unit:.4f} dB)",
    )


def test_criterion_13_round_trips(tmp_path):
    rng = torch.Generator().manual_seed(13)
    arch_ok = True
    for _ in range(1000):
        arch = random_architecture(rng)
        if import_architecture(export_architecture(arch)) != arch:
            arch_ok = False
            break

    ckpt_ok = True
    dtypes = [torch.float32, torch.float64, torch.int64, torch.uint8]
    for case in range(50):
        tensors = {}
        for t in range(int(torch.randint(1, 5, (1,), generator=rng))):
            shape = tuple(
                int(torch.randint(1, 6, (1,), generator=rng))
                for _ in range(int(torch.randint(0, 4, (1,), generator=rng)))
            )
            dtype = dtypes[int(torch.randint(len(dtypes), (1,), generator=rng))]
            if dtype.is_floating_point:
                tensor = torch.randn(shape, generator=rng).to(dtype)
            else:
                tensor = torch.randint(0, 200, shape, generator=rng).to(dtype)
            tensors[f"t{case}_{t}"] = tensor
        path = tmp_path / f"rt{case}.ckpt"
        save_checkpoint(path, tensors, {"case": str(case)})
        loaded, meta = load_checkpoint(path)
        if set(loaded) != set(tensors) or meta.get("case") != str(case):
            ckpt_ok = False
            break
        if not all(torch.equal(loaded[k], tensors[k]) for k in tensors):
            ckpt_ok = False
            break
    report(
        13,
        "1000 architecture round-trips and 50 checkpoint round-trips are lossless",
        arch_ok and ckpt_ok,
    )
