"""Command-line batch runner.

Every command reads a graph (JSON file or inline JSON, or a lattice box via
``--box d,L``), validates its parameters, runs one experiment and writes a
single JSON report or CSV table.  Exit codes: 0 success, 1 invalid input,
2 numerical failure, 3 a statistical identity check failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from typing import Any, Sequence

import numpy as np
import scipy

from . import __version__
from .graph import GraphError, WeightedGraph, as_generator, box_graph, load_graph
from .loopmeas import (
    FDDQuery,
    LoopParams,
    bosonic_fdd,
    bosonic_mass_jumps,
    bosonic_total_mass,
    markov_fdd,
    markov_mass_jumps,
    resolve_states,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
MC_COMMANDS = {"soup", "iso", "symanzik", "bose", "rdm", "diagnostics"}


# --- serialization ---------------------------------------------------------------------


def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    text = format(x, ".17g")
    return text if any(c in text for c in ".en") else text + ".0"


def dumps(obj: Any, indent: int = 0) -> str:
    """JSON with 17-significant-digit floats and insertion-ordered keys."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        body = ",\n".join(f"{inner}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items())
        return "{\n" + body + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number, bool)) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + dumps(v, indent + 1) for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_csv(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_num(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
    return buf.getvalue()


def write_atomic(path: str, text: str) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- argument parsing ------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(t) for t in str(text).replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(",", " ").split()]


def _json_arg(text: str):
    return json.loads(text)


def _common(p: argparse.ArgumentParser, mc: bool = False) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--graph", help="graph JSON file or inline JSON document")
    src.add_argument("--box", help="Dirichlet box 'd,L' in Z^d")
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", help="output file (stdout if omitted)")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--seed", type=int, default=0, help="root seed (Monte Carlo commands only)")
    if mc:
        p.add_argument("--samples", type=int, default=10000)


def _query(p: argparse.ArgumentParser) -> None:
    p.add_argument("--times", type=_floats, required=True, help="comma-separated increasing times")
    p.add_argument("--states", required=True, help="comma-separated vertex labels")
    p.add_argument("--lengths", type=_json_arg, required=True, help='JSON interval list, e.g. [[0.9, 1.1]] or [[2, "inf"]]')


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bosonloops", description="Loop measures, loop soups and Bose gases on finite graphs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", help="JSON document whose keys provide defaults for the command's flags")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mass", help="loop masses with at least one jump and the Bosonic total mass")
    _common(p)

    p = sub.add_parser("fdd", help="finite-dimensional distribution of one loop measure")
    _common(p)
    _query(p)
    p.add_argument("--measure", choices=("markov", "bosonic", "both"), default="both")

    p = sub.add_parser("soup", help="sample loop soups and report their occupation fields")
    _common(p, mc=True)
    p.add_argument("--measure", choices=("bosonic", "markov"), default="bosonic")
    p.add_argument("--eps", type=float, default=1e-3, help="minimal loop length for Markovian soups")
    p.add_argument("--soups", help="also write the sampled loops as JSON lines to this file")

    p = sub.add_parser("torus-limit", help="projected space-time fdd against its torus limit")
    _common(p)
    _query(p)
    p.add_argument("--Ns", type=_ints, default=[8, 16, 32, 64])
    p.add_argument("--variant", choices=("independent", "symmetrized", "periodic_mixing", "perturbed"), default="independent")
    p.add_argument("--schedule", choices=("weak", "strong"), default="weak")
    p.add_argument("--winding", choices=("all", "nonzero"), default="all")

    p = sub.add_parser("iso", help="isomorphism check E[exp(-<v, field>)] for soup and Gaussian")
    _common(p, mc=True)
    p.add_argument("--v", type=_floats, required=True)

    p = sub.add_parser("symanzik", help="Symanzik and Dynkin identities")
    _common(p, mc=True)
    p.add_argument("--x", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--v", type=_floats, help="linear J = exp(-<v, .>)")
    p.add_argument("--rates", type=_floats, help="mixture J: per-site rates")
    p.add_argument("--weights", type=_floats, help="mixture J: per-site weights")

    for name, text in (("bose", "partition function of a Bose gas"), ("rdm", "reduced density matrix entry of a Bose gas")):
        p = sub.add_parser(name, help=text)
        _common(p, mc=True)
        p.add_argument("--potential", type=_json_arg, default={}, help='pair potential by hop distance, e.g. {"0": 1, "1": 0.2}')
        p.add_argument("--nmax", type=int, default=None, help="Fock oracle particle cutoff (omit to skip)")
        if name == "rdm":
            p.add_argument("--x", required=True)
            p.add_argument("--y", required=True)

    p = sub.add_parser("diagnostics", help="winding diagnostics of a space-time walk")
    _common(p, mc=True)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--variant", choices=("independent", "symmetrized", "periodic_mixing", "perturbed"), default="independent")
    return ap


def _subparsers(ap: argparse.ArgumentParser) -> dict:
    for act in ap._actions:
        if isinstance(act, argparse._SubParsersAction):
            return dict(act.choices)
    return {}


def parse_args(ap: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    """Parse ``argv``; keys of a ``--config`` document become flag defaults."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return ap.parse_args(argv)
    with open(known.config) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    subs = _subparsers(ap)
    argv = list(argv)
    if "command" in cfg and not any(a in subs for a in argv):
        argv.append(str(cfg["command"]))
    defaults = {k.replace("-", "_"): v for k, v in cfg.items() if k != "command"}
    for sp in subs.values():
        for act in sp._actions:
            if act.dest not in defaults:
                continue
            val = defaults[act.dest]
            if act.type in (_floats, _ints) and not isinstance(val, str):
                conv = float if act.type is _floats else int
                val = [conv(t) for t in (val if isinstance(val, list) else [val])]
            act.default = val
            act.required = False
    return ap.parse_args(argv)


# --- commands ---------------------------------------------------------------------------


def _graph(args) -> WeightedGraph:
    if getattr(args, "box", None):
        d, L = _ints(args.box)
        return box_graph(d, L)
    if not args.graph:
        raise ValueError("a graph is required (--graph or --box)")
    return load_graph(args.graph)


def _label(g: WeightedGraph, text: str):
    if text in g.index:
        return text
    try:
        num = int(text)
    except ValueError:
        num = None
    if num is not None and num in g.index:
        return num
    g.idx(text)  # raises naming the label


def _fdd_query(g: WeightedGraph, args) -> FDDQuery:
    states = [_label(g, s.strip()) for s in str(args.states).split(",")]
    return FDDQuery(tuple(args.times), tuple(states), args.lengths)


def _rng(args):
    from .soup import stream

    return stream(args.seed)


def cmd_mass(args, g):
    p = LoopParams(args.mu, args.beta)
    Q = as_generator(g)
    return {
        "markov_mass_jumps": markov_mass_jumps(Q, args.mu),
        "bosonic_mass_jumps": bosonic_mass_jumps(Q, p),
        "bosonic_total_mass": bosonic_total_mass(Q, p),
    }


def cmd_fdd(args, g):
    q = _fdd_query(g, args)
    out = {}
    if args.measure in ("markov", "both"):
        out["markov"] = markov_fdd(g, args.mu, q)
    if args.measure in ("bosonic", "both"):
        out["bosonic"] = bosonic_fdd(g, LoopParams(args.mu, args.beta), q)
    return out


def cmd_soup(args, g):
    from .soup import BosonicSoupSampler, MarkovSoupSampler, occupation_field

    rng = _rng(args)
    if args.measure == "bosonic":
        sampler = BosonicSoupSampler(g, LoopParams(args.mu, args.beta))
    else:
        sampler = MarkovSoupSampler(g, args.mu, args.eps)
    lines, rows = [], []
    for s in range(args.samples):
        soup = sampler.sample(rng, seed=args.seed)
        occ = occupation_field(soup, g.n).values
        rows.append({"soup": s, "loops": len(soup), **{f"L[{lab}]": float(occ[i]) for i, lab in enumerate(g.vertices)}})
        if args.soups:
            lines.append(soup.to_json(list(g.vertices)))
    if args.soups:
        write_atomic(args.soups, "".join(t if t.endswith("\n") else t + "\n" for t in lines))
    occ = np.array([[r[f"L[{lab}]"] for lab in g.vertices] for r in rows])
    summary = {
        "mean_loops": float(np.mean([r["loops"] for r in rows])),
        "mean_occupation": occ.mean(axis=0).tolist(),
        "mean_occupation_stderr": (occ.std(axis=0, ddof=1) / math.sqrt(len(rows))).tolist() if len(rows) > 1 else None,
    }
    return {"summary": summary, "rows": rows}


def cmd_torus(args, g):
    from .spacetime import torus_limit_sweep, build_spacetime, projected_fdd_exact, torus_limit_value

    q = _fdd_query(g, args)
    if args.winding == "all":
        rows = torus_limit_sweep(g, args.mu, args.beta, q, args.Ns, args.variant, schedule=args.schedule, seed=args.seed)
    else:
        limit = torus_limit_value(args.variant, g, args.mu, args.beta, q)
        rows = []
        for N in sorted(args.Ns):
            st = build_spacetime(g, N, args.beta, args.variant, schedule=args.schedule, seed=args.seed)
            val = projected_fdd_exact(st, args.mu, q, winding="nonzero")
            rows.append({"variant": args.variant, "N": N, "query_id": "q0", "value": val, "limit": limit, "abs_error": abs(val - limit)})
    return {"rows": rows}


def _checks(checks) -> dict:
    out = {"checks": [c.to_dict() for c in checks]}
    out["all_pass"] = all(c.passed for c in checks)
    return out


def cmd_iso(args, g):
    from .gaussian import verify_lejan

    if len(args.v) != g.n or min(args.v) < 0:
        raise ValueError(f"--v needs {g.n} nonnegative entries")
    return _checks(verify_lejan(g, args.mu, args.v, args.samples, _rng(args)))


def cmd_symanzik(args, g):
    from .gaussian import JSpec, dynkin_identity, symanzik_closed, symanzik_mc

    x, y = _label(g, args.x), _label(g, args.y)
    out = {}
    if args.v is not None:
        if len(args.v) != g.n:
            raise ValueError(f"--v needs {g.n} entries")
        J = JSpec.linear(args.v)
        lhs, rhs = symanzik_closed(g, args.mu, args.beta, x, y, args.v)
        dl, dr = dynkin_identity(g, args.mu, x, y, args.v)
        out["closed"] = {"symanzik_lhs": lhs, "symanzik_rhs": rhs, "dynkin_lhs": dl, "dynkin_rhs": dr}
    elif args.rates is not None:
        J = JSpec.mixture(args.rates, args.weights)
    else:
        raise ValueError("give --v (linear J) or --rates (mixture J)")
    if args.samples > 0:
        out.update(_checks(symanzik_mc(g, args.mu, args.beta, x, y, J, args.samples, _rng(args))))
    if "closed" in out:
        c = out["closed"]
        close = abs(c["symanzik_lhs"] - c["symanzik_rhs"]) <= 1e-10 * max(1.0, abs(c["symanzik_rhs"]))
        close &= abs(c["dynkin_lhs"] - c["dynkin_rhs"]) <= 1e-10 * max(1.0, abs(c["dynkin_rhs"]))
        out["all_pass"] = bool(out.get("all_pass", True) and close)
    return out


def _bose_system(args, g):
    from .bose import BoseSystem

    pot = {int(k): float(v) for k, v in dict(args.potential).items()}
    return BoseSystem(g, LoopParams(args.mu, args.beta), pot)


def cmd_bose(args, g):
    from .bose import fock_oracle, partition_free, partition_interacting_mc, particle_density

    s = _bose_system(args, g)
    out = {"log_z_free": partition_free(s), "particle_density_free": particle_density(s)}
    if args.samples > 0:
        out["monte_carlo"] = partition_interacting_mc(s, args.samples, _rng(args)).to_dict()
    if args.nmax is not None:
        out["fock"] = fock_oracle(s, args.nmax).to_dict()
    if "monte_carlo" in out and "fock" in out:
        mc, fk = out["monte_carlo"], out["fock"]
        out["all_pass"] = abs(mc["value"] - fk["log_z"]) <= fk["log_z_bound"] + 3 * mc["stderr"]
    return out


def cmd_rdm(args, g):
    from .bose import fock_oracle, rdm_free, rdm_interacting_mc

    s = _bose_system(args, g)
    x, y = _label(g, args.x), _label(g, args.y)
    i, j = resolve_states(s.generator, [x, y])
    out = {"rho1_free": rdm_free(s, i, j)}
    if args.samples > 0:
        out["monte_carlo"] = rdm_interacting_mc(s, i, j, args.samples, _rng(args)).to_dict()
    if args.nmax is not None:
        f = fock_oracle(s, args.nmax)
        out["fock"] = {"rho1": float(f.rho1[i, j]), "rho1_bound": f.rho1_bound, "n_max": f.n_max}
    if "monte_carlo" in out and "fock" in out:
        mc, fk = out["monte_carlo"], out["fock"]
        out["all_pass"] = abs(mc["value"] - fk["rho1"]) <= fk["rho1_bound"] + 3 * mc["stderr"]
    return out


def cmd_diagnostics(args, g):
    from .spacetime import build_spacetime, winding_diagnostics

    st = build_spacetime(g, args.N, args.beta, args.variant, seed=args.seed)
    rep = winding_diagnostics(st, args.mu, args.samples, _rng(args))
    return {"N": args.N, "beta_sq_over_N": args.beta**2 / args.N, **rep.to_dict()}


COMMANDS = {
    "mass": cmd_mass,
    "fdd": cmd_fdd,
    "soup": cmd_soup,
    "torus-limit": cmd_torus,
    "iso": cmd_iso,
    "symanzik": cmd_symanzik,
    "bose": cmd_bose,
    "rdm": cmd_rdm,
    "diagnostics": cmd_diagnostics,
}


def _echo(args) -> dict:
    skip = {"command", "config", "out", "format", "soups"}
    echo = {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}
    if args.command not in MC_COMMANDS:
        echo.pop("seed", None)
    return echo


def run(args) -> tuple[int, str]:
    g = _graph(args)
    result = COMMANDS[args.command](args, g)
    record = {
        "command": args.command,
        "parameters": _echo(args),
        "seed": args.seed if args.command in MC_COMMANDS else None,
        "versions": {"bosonloops": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "result": result,
    }
    if args.format == "csv":
        rows = result.get("rows") or result.get("checks")
        if rows is None:
            rows = [{k: v for k, v in result.items() if not isinstance(v, (dict, list))}]
        meta = {"command": args.command, "seed": record["seed"], "version": __version__}
        text = to_csv([{**meta, **{k: v for k, v in r.items() if not isinstance(v, (dict, list))}} for r in rows])
    else:
        text = dumps(record) + "\n"
    code = EXIT_VERIFY if result.get("all_pass") is False else EXIT_OK
    return code, text


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    try:
        args = parse_args(ap, argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code not in (0, None) else EXIT_OK
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        code, text = run(args)
    except (GraphError, ValueError, KeyError, OSError, TypeError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, np.linalg.LinAlgError, RuntimeError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    if code == EXIT_VERIFY:
        print("verification failed: an identity check exceeded 3 standard errors", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
