"""Command-line entry point: ``kpbc simulate | verify | equilibrium``.

Exit codes
----------
0  success
2  integration or equilibrium-solver failure
3  invalid scenario, model id, parameters or arguments
4  verification found violations (the report is still written)
"""

import argparse
import dataclasses
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .controllers import (FirstOrderKPBCConfig, KrasovskiiPBCConfig, OpenLoopInput,
                          ShiftedPBCConfig, assemble_closed_loop, sine_signal)
from .errors import ContractError, KPBCError, ScenarioError, SolverError
from .models import ZetaParams, get_model, zeta_equilibrium
from .passivity import (DifferentialStorage, SampleBox, check_exactness, shifted_storage,
                        verify_differential, verify_incremental, verify_krasovskii,
                        verify_passivity, verify_shifted)
from .simulation import (IntegratorConfig, SimulationScenario, _default_workers, batch_run)
from .system import EquilibriumPair, find_equilibrium

EXIT_OK, EXIT_FAILURE, EXIT_INVALID, EXIT_VIOLATION = 0, 2, 3, 4
SCHEMA_VERSION = 1

GAIN_NAMES = {"kpbc": ("K1", "K2", "K3"), "kpbc1": ("K2", "K3"),
              "spbc": ("K4", "K5", "K6", "K7"), "open-loop": ()}


def load_schema():
    text = resources.files("kpbc").joinpath("schema/scenario-v1.json").read_text()
    return json.loads(text)


def load_scenario(path):
    """Read and validate a scenario file; raises ScenarioError."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from None
    validate_scenario(data)
    return data


def validate_scenario(data):
    try:
        jsonschema.validate(data, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ScenarioError(f"scenario invalid at {where}: {exc.message}") from None
    ctrl = data.get("controller")
    if ctrl:
        extra = set(ctrl.get("gains", {})) - set(GAIN_NAMES[ctrl["kind"]])
        if extra:
            raise ScenarioError(f"gains {sorted(extra)} do not apply to {ctrl['kind']}")
        if ctrl["kind"] == "open-loop" and "nu" in ctrl:
            raise ScenarioError("open-loop runs take 'input', not 'nu'")
        if ctrl["kind"] != "open-loop" and "input" in ctrl:
            raise ScenarioError("'input' is only valid for open-loop runs")


def apply_overrides(data, seed=None, dt=None, t_final=None):
    data = json.loads(json.dumps(data))
    integ = data.setdefault("integrator", {})
    if dt is not None:
        integ["dt"] = dt
    if t_final is not None:
        integ["t_final"] = t_final
    if seed is not None:
        data["seed"] = seed
        for block in data.get("verification", []):
            block["seed"] = seed
    validate_scenario(data)
    return data


def _signal(spec, m, default=None):
    """Callable ``t -> (m,)`` and its derivative from a signal spec."""
    if spec is None:
        spec = default
    if spec is None or spec["type"] == "zero":
        return None, None
    if spec["type"] == "constant":
        value = np.broadcast_to(np.asarray(spec.get("value", 0.0), dtype=float), (m,)).copy()
        return (lambda t: value), (lambda t: np.zeros(m))
    amp = np.broadcast_to(np.asarray(spec.get("amplitude", 1.0), dtype=float), (m,))
    omega = float(spec.get("omega", 1.0))
    phase = float(spec.get("phase", 0.0))
    nu = sine_signal(amp, omega, phase, spec.get("offset", 0.0))
    return nu, (lambda t: amp * omega * np.cos(omega * t + phase))


def build_closed_loop(data):
    """Model entry and closed loop described by a validated scenario."""
    model = data["model"]
    entry = get_model(model["id"], model.get("params"))
    sys_ = entry.system
    ctrl = data.get("controller", {"kind": "kpbc"})
    kind = ctrl["kind"]
    u_star = np.asarray(ctrl.get("u_star", entry.anchor.u_star), dtype=float)
    if u_star.size != sys_.m:
        raise ScenarioError(f"u_star must have {sys_.m} entries")
    gains = {k: ctrl.get("gains", {}).get(k, 1.0) for k in GAIN_NAMES[kind]}
    if kind == "open-loop":
        u, du = _signal(ctrl.get("input"), sys_.m,
                        {"type": "constant", "value": u_star.tolist()})
        if u is None:
            u, du = (lambda t: np.zeros(sys_.m)), (lambda t: np.zeros(sys_.m))
        cfg = OpenLoopInput(u, du, ctrl.get("input"))
        return entry, assemble_closed_loop(sys_, entry.storage, cfg, "open")
    nu, _ = _signal(ctrl.get("nu"), sys_.m)
    if kind == "kpbc":
        cfg = KrasovskiiPBCConfig(u_star=u_star, nu1=nu, **gains)
    elif kind == "kpbc1":
        cfg = FirstOrderKPBCConfig(u_star=u_star, nu1=nu, **gains)
    else:
        cfg = ShiftedPBCConfig(u_star=u_star, nu2=nu, **gains)
    storage = entry.storage
    if np.any(u_star != entry.anchor.u_star):
        # the storage anchor follows the requested set point
        x_star = find_equilibrium(sys_, entry.anchor.x_star, u_star).x_star
        storage = dataclasses.replace(storage, anchor=EquilibriumPair(x_star, u_star))
    return entry, assemble_closed_loop(sys_, storage, cfg, kind)


def initial_states(data, cl):
    spec = data.get("initial_state", "origin")
    if isinstance(spec, str) or (spec and not isinstance(spec[0], (list, str))):
        spec = [spec]
    states = []
    for s in spec:
        if s == "origin":
            states.append(np.zeros(cl.dim))
        elif s == "anchor":
            states.append(cl.anchor_state)
        else:
            z = np.asarray(s, dtype=float)
            if z.shape != (cl.dim,):
                raise ScenarioError(f"initial state needs {cl.dim} entries, got {z.size}")
            states.append(z)
    return states


def integrator_config(data):
    opts = dict(data.get("integrator", {}))
    backend = opts.pop("backend", "auto")
    return IntegratorConfig(**opts), None if backend == "auto" else backend


def _csv_write(path, traj):
    cols = traj.columns()
    header = ",".join(name for name, _ in cols)
    table = np.column_stack([c for _, c in cols])
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header=header, comments="")


def read_csv(path):
    """Parse a trajectory CSV into ``{column: array}``."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: table[:, i] for i, name in enumerate(header)}


PLOT_TEMPLATE = '''"""Plot {csv_names} (generated; needs matplotlib)."""
import csv
import sys

import matplotlib.pyplot as plt

FILES = {files!r}


def load(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return {{k: [float(r[k]) for r in rows] for k in rows[0]}}


fig, (ax_x, ax_s) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
for path in FILES:
    data = load(path)
    for key in data:
        if key.startswith("x"):
            ax_x.plot(data["t"], data[key], label=f"{{path}}:{{key}}")
    for key in ("S1", "S2", "S_K"):
        if key in data:
            ax_s.plot(data["t"], data[key], label=f"{{path}}:{{key}}")
            break
ax_x.set_ylabel("state")
ax_s.set_ylabel("storage")
ax_s.set_xlabel("t")
ax_x.legend(fontsize="small")
ax_s.legend(fontsize="small")
fig.tight_layout()
if len(sys.argv) > 1:
    fig.savefig(sys.argv[1])
else:
    plt.show()
'''


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _err(msg):
    print(f"kpbc: {msg}", file=sys.stderr)


def _out_dir(args, data):
    out = args.out or data.get("output_dir")
    if not out:
        raise ScenarioError("no output directory (use --out or output_dir)")
    return Path(out)


def cmd_simulate(args):
    try:
        data = apply_overrides(load_scenario(args.scenario), args.seed, args.dt, args.t_final)
        entry, cl = build_closed_loop(data)
        z0s = initial_states(data, cl)
        cfg, backend = integrator_config(data)
        conv = data.get("convergence", {})
        target = conv.get("target", "family" if entry.family is not None else "point")
        anchor = entry.family if target == "family" else cl.anchor
        if target == "family" and anchor is None:
            raise ScenarioError(f"model {data['model']['id']} has no equilibrium family")
        out = _out_dir(args, data)
    except (ContractError, KPBCError, TypeError) as exc:
        _err(str(exc))
        return EXIT_INVALID

    multi = len(z0s) > 1
    scenarios = [SimulationScenario(f"{data['id']}#{k + 1}" if multi else data["id"], cl, z0,
                                    cfg, anchor, conv.get("eps", 1e-3),
                                    conv.get("window", 10.0), backend, keep_trajectory=True)
                 for k, z0 in enumerate(z0s)]
    summaries = batch_run(scenarios)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for k, s in enumerate(summaries):
        name = f"trajectory_{k + 1}.csv" if multi else "trajectory.csv"
        if s.trajectory is not None:
            _csv_write(out / name, s.trajectory)
            names.append(name)
    runs = [dict(s.to_dict(), csv=(names[k] if s.error is None else None))
            for k, s in enumerate(summaries)]
    doc = {"scenario_id": data["id"], "schema_version": SCHEMA_VERSION,
           "kind": cl.kind, "model": data["model"],
           "integrator": {"method": cfg.method, "dt": cfg.dt, "t_final": cfg.t_final,
                          "record_stride": cfg.record_stride}}
    doc.update(runs[0] if not multi else {"runs": runs})
    _write_json(out / "summary.json", doc)
    (out / "plot_trajectory.py").write_text(
        PLOT_TEMPLATE.format(csv_names=", ".join(names) or "no runs", files=names))
    failed = [s for s in summaries if s.error is not None]
    for s in failed:
        _err(f"{s.scenario_id}: {s.error}")
    return EXIT_FAILURE if failed else EXIT_OK


def _run_block(entry, block, seed_default, workers):
    sys_ = entry.system
    storage = entry.storage
    box = SampleBox(block["box"]["lower"], block["box"]["upper"],
                    count=block.get("samples", 100_000),
                    seed=block.get("seed", seed_default),
                    strategy=block.get("strategy", "uniform"))
    tol = block.get("tolerance", 1e-9)
    eq_tol = block.get("equality_tolerance", 1e-9)
    M = np.asarray(block.get("metric", entry.metric), dtype=float)
    prop = block["property"]
    if prop == "krasovskii":
        return verify_krasovskii(sys_, storage, box, tol, eq_tol=eq_tol, workers=workers)
    if prop == "differential":
        # output taken as g(x)^T M dx, i.e. the one induced by the storage
        ds = DifferentialStorage(M, h_d=lambda x: np.swapaxes(
            np.einsum("ij,...jk->...ik", M, sys_.input_matrix(x)), -1, -2))
        return verify_differential(sys_, ds, box, tol, eq_tol=eq_tol, workers=workers)
    if prop == "shifted":
        return verify_shifted(sys_, shifted_storage(sys_, storage), box, tol, workers=workers)
    if prop == "passivity":
        return verify_passivity(sys_, lambda x: 0.5 * np.einsum("...i,ij,...j->...", x, M, x),
                                box, tol, grad=lambda x: x @ (0.5 * (M + M.T)),
                                workers=workers)
    if prop == "incremental":
        return verify_incremental(sys_, M, box, tol, segments=block.get("segments", 64),
                                  workers=workers)
    return check_exactness(sys_, M, box, tol, workers=workers)


def cmd_verify(args):
    try:
        data = apply_overrides(load_scenario(args.scenario), args.seed, args.dt, args.t_final)
        blocks = data.get("verification", [])
        if not blocks:
            raise ScenarioError("scenario has no verification blocks")
        entry = get_model(data["model"]["id"], data["model"].get("params"))
        out = _out_dir(args, data)
        seed = data.get("seed", 42)
        workers = _default_workers(8)
        reports = [_run_block(entry, b, seed, workers) for b in blocks]
    except (ContractError, KPBCError, TypeError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    passed = all(r.passed for r in reports)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", {"scenario_id": data["id"], "passed": passed,
                                      "blocks": [r.to_dict() for r in reports]})
    for r in reports:
        status = "ok" if r.passed else f"{r.violations} violations"
        print(f"{r.property}: {r.samples} samples, worst margin {r.worst_margin:.3e}, {status}")
    return EXIT_OK if passed else EXIT_VIOLATION


def _parse_params(items):
    params = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ScenarioError(f"--param expects k=v, got {item!r}")
        try:
            params[key] = float(value)
        except ValueError:
            raise ScenarioError(f"--param {key}: {value!r} is not a number") from None
    return params


def cmd_equilibrium(args):
    try:
        params = _parse_params(args.param)
        if args.vstar is not None:
            if args.model != "zeta":
                raise ScenarioError("--vstar applies to the zeta model only")
            params["v_star"] = args.vstar
        entry = get_model(args.model, params)
        sys_ = entry.system
        x0 = np.zeros(sys_.n) if args.guess is None else np.asarray(args.guess, dtype=float)
        u0 = entry.anchor.u_star if args.input is None else np.asarray(args.input, dtype=float)
        if x0.size != sys_.n or u0.size != sys_.m:
            raise ScenarioError(f"guess needs {sys_.n} states and {sys_.m} inputs")
    except (ContractError, KPBCError, TypeError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    try:
        if args.model == "zeta" and args.guess is None and args.input is None:
            pair = zeta_equilibrium(ZetaParams(**params))
            method = "closed-form"
        else:
            pair = find_equilibrium(sys_, x0, u0, mode=args.mode)
            method = "newton"
    except SolverError as exc:
        _err(f"equilibrium solver failed: {exc}")
        return EXIT_FAILURE
    print(json.dumps(dict(pair.to_dict(), model=args.model, method=method), sort_keys=True))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="kpbc", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p):
        p.add_argument("--seed", type=int, help="override every sampling seed")
        p.add_argument("--dt", type=float, help="override the integrator step")
        p.add_argument("--t-final", type=float, dest="t_final", help="override the horizon")

    p = sub.add_parser("simulate", help="run a closed-loop scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    overrides(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="run the verification blocks of a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    overrides(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("equilibrium", help="print an equilibrium pair as JSON")
    p.add_argument("--model", required=True)
    p.add_argument("--vstar", type=float)
    p.add_argument("--param", action="append", metavar="K=V")
    p.add_argument("--guess", type=float, nargs="+", help="initial state guess")
    p.add_argument("--input", type=float, nargs="+", help="fixed (or initial) input")
    p.add_argument("--mode", choices=("fix-u", "free-u"), default="fix-u")
    p.set_defaults(func=cmd_equilibrium)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
