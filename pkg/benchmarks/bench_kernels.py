"""Time the Zeta closed-loop integrators: compiled kernel, pure-Python kernel
and the generic numpy RK4 loop.

    python benchmarks/bench_kernels.py --t-final 20 --repeat 3
"""

import argparse
import json
import time

import numpy as np

from kpbc import _kernels
from kpbc.controllers import (FirstOrderKPBCConfig, KrasovskiiPBCConfig, ShiftedPBCConfig,
                              assemble_closed_loop)
from kpbc.models import get_model
from kpbc.simulation import IntegratorConfig, _kernel_args, _params, simulate


def closed_loops():
    e = get_model("zeta")
    us = e.anchor.u_star
    return {
        "kpbc": (assemble_closed_loop(e.system, e.storage,
                                      KrasovskiiPBCConfig(K1=1, K2=1, K3=1, u_star=us), "kpbc"),
                 np.zeros(6)),
        "kpbc1": (assemble_closed_loop(e.system, e.storage,
                                       FirstOrderKPBCConfig(K2=1, K3=1, u_star=us), "kpbc1"),
                  np.zeros(5)),
        "spbc": (assemble_closed_loop(e.system, e.storage,
                                      ShiftedPBCConfig(K4=1, K5=1, K6=1, K7=1, u_star=us), "spbc"),
                 np.zeros(5)),
    }


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--t-final", type=float, default=20.0)
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--generic-t-final", type=float, default=2.0,
                    help="horizon for the (slow) generic loop; its time is scaled up")
    ap.add_argument("--json", action="store_true", help="print results as JSON")
    args = ap.parse_args(argv)

    backends = ["python"] + (["compiled"] if _kernels.compiled_kernels is not None else [])
    cfg = IntegratorConfig(dt=args.dt, t_final=args.t_final)
    steps = int(round(args.t_final / args.dt))
    rows = []
    for name, (cl, z0) in closed_loops().items():
        row = {"loop": name, "steps": steps}
        ref = None
        for b in backends:
            sec, traj = best_of(lambda: simulate(cl, z0, cfg, backend=b), args.repeat)
            row[b] = sec
            if ref is None:
                ref = traj
            else:
                row["max_diff"] = float(np.max(np.abs(traj.z - ref.z)))
        kind, gains, _ = _kernel_args(cl)
        for b in backends:
            kern = _kernels.get_kernel(b)
            sec, _ = best_of(lambda: kern(kind, *_params(cl), gains, float(cl.config.u_star[0]),
                                          z0, 0.0, args.dt, steps, 10, None), args.repeat)
            row[f"{b}_kernel"] = sec
        gcfg = IntegratorConfig(dt=args.dt, t_final=args.generic_t_final)
        sec, _ = best_of(lambda: simulate(cl, z0, gcfg, backend="generic"), 1)
        row["generic"] = sec * args.t_final / args.generic_t_final
        rows.append(row)

    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'loop':6s} {'steps':>8s} " + " ".join(f"{b:>10s}" for b in backends + ["generic"])
          + "  speedup  max|diff|")
    for r in rows:
        cells = " ".join(f"{r[b]:10.4f}" for b in backends + ["generic"])
        speed = r["python"] / r["compiled"] if "compiled" in r else float("nan")
        print(f"{r['loop']:6s} {r['steps']:8d} {cells}  {speed:7.1f}x  {r.get('max_diff', 0.0):.1e}")
    print("times in seconds, full simulate() including recorded monitors "
          "(generic extrapolated from a shorter horizon)")
    print()
    print(f"{'loop':6s} " + " ".join(f"{b + ' kernel':>16s}" for b in backends) + "  speedup")
    for r in rows:
        cells = " ".join(f"{r[b + '_kernel']:16.5f}" for b in backends)
        speed = (r["python_kernel"] / r["compiled_kernel"]) if "compiled_kernel" in r else float("nan")
        print(f"{r['loop']:6s} {cells}  {speed:7.1f}x")
    print("raw RK4 kernel loop only")


if __name__ == "__main__":
    main()
