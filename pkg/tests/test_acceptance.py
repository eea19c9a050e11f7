"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines print outside output capture) or directly with
``python3 tests/test_acceptance.py``.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))
from conftest import oracle, random_task  # noqa: E402

from gemmsim.accel import make_accelerator  # noqa: E402
from gemmsim.accel.sa import run_tile  # noqa: E402
from gemmsim.cli import main as cli_main  # noqa: E402
from gemmsim.config import AccelConfig  # noqa: E402
from gemmsim.cost import (CostModelParams, cost_summary, et_fullsim_only, et_secda,  # noqa: E402
                          et_synth_only)
from gemmsim.driver import GemmTask, dispatch_pipelined, im2col, plan_weight_tiles  # noqa: E402
from gemmsim.quant import QuantTensor, RequantParams, requantize_matrix  # noqa: E402

VM = AccelConfig(kind="vm")
SA = AccelConfig(kind="sa")


def _sa(size: int, **extra) -> AccelConfig:
    return SA.replace(**{"sa.rows": size, "sa.cols": size}, **extra)


# -- criteria ------------------------------------------------------------------

def oracle_equivalence():
    """1000 random GEMMs agree bit for bit on cpu, vm and sa, tiled plans included."""
    rng = np.random.default_rng(20240601)
    t0 = time.perf_counter()
    mismatches = tiled = 0
    for i in range(1000):
        M, N, K = (int(v) for v in rng.integers(1, 65, 3))
        task = random_task(rng, M, N, K)
        want = oracle(task)
        # every third task squeezes the weight buffers so plans split N or K
        cap = int(rng.integers(16, 256)) if i % 3 == 0 else None
        for base in (VM, SA):
            cfg = base
            if cap is not None:
                cfg = base.replace(**{f"{base.kind}.global_weight_buffer_bytes": cap})
                tiled += len(plan_weight_tiles(M, N, K, cfg).tiles) > 1
            outs, _ = dispatch_pipelined([task], make_accelerator(cfg))
            mismatches += not np.array_equal(outs[0].data, want)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60 and tiled > 0
    return ok, f"{mismatches} mismatches, {tiled} multi-tile runs, {elapsed:.1f}s"


def ppu_transfer_reduction():
    """dma_bytes_out with the PPU off is exactly 4x the bytes with it on."""
    rng = np.random.default_rng(7)
    ratios = set()
    for _ in range(40):
        M, N, K = (int(v) for v in rng.integers(1, 65, 3))
        task = random_task(rng, M, N, K)
        for base in (VM, SA):
            off = base.replace(**{f"{base.kind}.ppu_enabled": False})
            o_on, r_on = dispatch_pipelined([task], make_accelerator(base))
            o_off, r_off = dispatch_pipelined([task], make_accelerator(off))
            if not np.array_equal(o_on[0].data, o_off[0].data):
                return False, "outputs differ with the PPU off"
            ratios.add(r_off.counters.dma_bytes_out / r_on.counters.dma_bytes_out)
    return ratios == {4.0}, f"ratios seen: {sorted(ratios)}"


def scheduler_reuse():
    """Naive VM scheduling reads the global weight buffer 4x as often as broadcast."""
    rng = np.random.default_rng(8)
    ratios = set()
    naive = VM.replace(**{"vm.broadcast_enabled": False})
    for _ in range(40):
        M, N, K = (int(v) for v in rng.integers(1, 65, 3))
        task = random_task(rng, M, N, K)
        ob, rb = dispatch_pipelined([task], make_accelerator(VM))
        on, rn = dispatch_pipelined([task], make_accelerator(naive))
        if not np.array_equal(ob[0].data, on[0].data):
            return False, "outputs differ between schedules"
        if rb.counters.mac_ops_issued != rn.counters.mac_ops_issued:
            return False, "schedules issued different work"
        ratios.add(rn.counters.global_weight_buffer_reads / rb.counters.global_weight_buffer_reads)
    want = VM.vm.num_gemm_units
    return ratios == {float(want)}, f"ratios seen: {sorted(ratios)} (units={want})"


def sa_tile_latency():
    """Unstalled tile latency is K + R + C - 1 for R = C in {4, 8, 16}, K in 1..64."""
    rng = np.random.default_rng(9)
    bad = []
    for R in (4, 8, 16):
        for K in range(1, 65):
            a = rng.integers(-128, 128, (R, K))
            w = rng.integers(-128, 128, (K, R))
            acc, cycles, stalls, _ = run_tile(R, R, a, w)
            if cycles != K + 2 * R - 1 or not np.array_equal(acc, a @ w) or stalls:
                bad.append((R, K, cycles))
    return not bad, f"{3 * 64 - len(bad)}/{3 * 64} tiles exact" + (f", first miss {bad[0]}" if bad else "")


def sa_size_scaling():
    """MAC throughput of a 16x16 array over an 8x8 one on M=N=128, K=256."""
    rng = np.random.default_rng(10)
    task = random_task(rng, 128, 128, 256)
    want = oracle(task)
    tput = {}
    for size in (8, 16):
        outs, rep = dispatch_pipelined([task], make_accelerator(_sa(size)))
        if not np.array_equal(outs[0].data, want):
            return False, f"{size}x{size} output mismatch"
        tput[size] = rep.counters.mac_ops_issued / rep.counters.component_cycles["sa.array"]
    ratio = tput[16] / tput[8]
    return 3.6 <= ratio <= 4.0, f"throughput 8x8={tput[8]:.2f} 16x16={tput[16]:.2f} ratio={ratio:.3f}"


def pipeline_property():
    """Pipelined makespan <= serial; strictly less when compute covers host work."""
    rng = np.random.default_rng(11)
    cases = strict = 0
    for trial in range(12):
        n = 4 + trial % 3
        # alternate deep-K (compute-bound) and shallow-K (host-bound) batches
        K = 256 if trial % 2 == 0 else int(rng.integers(1, 17))
        tasks = [random_task(rng, 32, 32, K) for _ in range(n)]
        cfg = _sa(4) if trial % 4 == 0 else (VM if trial % 4 == 1 else _sa(8))
        po, pr = dispatch_pipelined(tasks, make_accelerator(cfg), pipelined=True)
        so, sr = dispatch_pipelined(tasks, make_accelerator(cfg), pipelined=False)
        if any(not np.array_equal(a.data, b.data) for a, b in zip(po, so)):
            return False, "pipelined and serial outputs differ"
        if pr.elapsed_cycles > sr.elapsed_cycles:
            return False, f"pipelined {pr.elapsed_cycles} > serial {sr.elapsed_cycles}"
        if sr.accel_cycles >= sr.pack_cycles + sr.unpack_cycles:
            strict += 1
            if not pr.elapsed_cycles < sr.elapsed_cycles:
                return False, f"no gain on a compute-bound batch ({pr.elapsed_cycles})"
        cases += 1
    return strict > 0, f"{cases} batches, {strict} compute-bound with strict gain"


def _direct_conv(x, xzp, f, fzp, stride, pads):
    """Explicitly padded loops over output pixels and taps; channels via dot."""
    n, h, w, c = x.shape
    cout, kh, kw, _ = f.shape
    top, bottom, left, right = pads
    xp = np.full((n, h + top + bottom, w + left + right, c), xzp, dtype=np.int64)
    xp[:, top:top + h, left:left + w] = x
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    xs = xp - xzp
    fs = f.astype(np.int64) - fzp
    out = np.zeros((n, ho, wo, cout), dtype=np.int64)
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                for co in range(cout):
                    s = 0
                    for ky in range(kh):
                        for kx in range(kw):
                            s += int(xs[b, oy * stride + ky, ox * stride + kx] @ fs[co, ky, kx])
                    out[b, oy, ox, co] = s
    return out


def convolution_correctness():
    """im2col + accelerator GEMM + requantize equals a direct convolution."""
    rng = np.random.default_rng(12)
    bad = 0
    for i in range(200):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.integers(1, 3))
        padded = i % 2 == 1
        pads = tuple(int(p) for p in rng.integers(0, k, 4)) if padded and k > 1 else (0, 0, 0, 0)
        h = int(rng.integers(k, 10))
        w = int(rng.integers(k, 10))
        cin, cout = int(rng.integers(1, 5)), int(rng.integers(1, 7))
        x = rng.integers(0, 256, (1, h, w, cin), dtype=np.uint8)
        f = rng.integers(0, 256, (cout, k, k, cin), dtype=np.uint8)
        xzp, fzp, ozp = (int(v) for v in rng.integers(0, 256, 3))
        bias = rng.integers(-5000, 5000, cout)
        rq = RequantParams.from_scale(float(rng.uniform(1e-4, 0.01)), bias, ozp, 0, 255)

        patches = im2col(QuantTensor(x, 0.02, xzp), k, stride, pads)
        rhs = QuantTensor(f.reshape(cout, -1).T.copy(), 0.01, fzp)
        cfg = VM if i % 2 == 0 else _sa(4)
        outs, _ = dispatch_pipelined([GemmTask(patches, rhs, rq)], make_accelerator(cfg))

        acc = _direct_conv(x, xzp, f, fzp, stride, pads)
        want = requantize_matrix(acc.reshape(-1, cout).astype(np.int32), rq).data
        bad += not np.array_equal(outs[0].data, want)
    return bad == 0, f"{200 - bad}/200 configurations exact"


def cost_model():
    """The three estimates match hand-expanded sums; S_t = 25 C_t reports 25."""
    p = CostModelParams(num_sim=10, num_synth=1, compile_time=2, sim_inference_time=1,
                        synth_time=50, hw_inference_time=1)
    hand = (10 * (2 + 1) + 1 * (50 + 1), 11 * (50 + 1), 11 * (2 + 1))
    got = (et_secda(p), et_synth_only(p), et_fullsim_only(p))
    q = CostModelParams(num_sim=30, num_synth=3, compile_time=120, synth_time=3000)
    ratio = cost_summary(q)["ratios"]["synth_time_over_compile_time"]
    return got == hand and ratio == 25, f"estimates {got}, compile-vs-synthesis ratio {ratio}"


def determinism():
    """20 repetitions of each CLI command give byte-identical output."""
    import contextlib
    import io

    commands = [
        ["run", "--model", "builtin:toy_cnn", "--backend", "sa", "--seed", "5"],
        ["run", "--model", "builtin:toy_cnn", "--backend", "vm", "--seed", "5"],
        ["sweep", "--model", "builtin:single_conv", "--sizes", "4,8", "--seed", "5"],
        ["cost", "--num-sim", "10", "--num-synth", "2", "--synth-time", "50"],
    ]
    distinct = []
    for argv in commands:
        outputs = set()
        for _ in range(20):
            buf = io.StringIO()
            with contextlib.redirect_stdout(buf):
                code = cli_main(argv)
            outputs.add((code, buf.getvalue()))
        distinct.append(len(outputs))
    return distinct == [1] * len(commands), f"distinct outputs per command: {distinct} over 20 runs"


CRITERIA = [
    ("1 oracle equivalence", oracle_equivalence),
    ("2 PPU transfer reduction", ppu_transfer_reduction),
    ("3 scheduler weight reuse", scheduler_reuse),
    ("4 SA tile latency", sa_tile_latency),
    ("5 SA size scaling", sa_size_scaling),
    ("6 pipeline property", pipeline_property),
    ("7 convolution correctness", convolution_correctness),
    ("8 cost model", cost_model),
    ("9 determinism", determinism),
]


def _line(label, ok, detail):
    return f"{'PASS' if ok else 'FAIL'} [{label}] {detail}"


@pytest.mark.parametrize("label,check", CRITERIA, ids=[c[0].split(" ", 1)[1].replace(" ", "_")
                                                       for c in CRITERIA])
def test_criterion(label, check, capsys):
    ok, detail = check()
    with capsys.disabled():
        print("\n" + _line(label, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for label, check in CRITERIA:
        ok, detail = check()
        failed += not ok
        print(_line(label, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
