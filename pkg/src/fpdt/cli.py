"""``fpdt`` command line: verify, mem-report, simulate, sweep, crossover."""

from __future__ import annotations

import argparse
import json
import sys

from . import config as cfgmod
from .config import ConfigError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _sizes(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _onoff(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


def _header(run: cfgmod.RunConfig, kind: str) -> dict:
    return {"format": f"fpdt.{kind}/{cfgmod.FORMAT_VERSION}", "config_hash": run.hash,
            "config_source": run.source}


def cmd_verify(run: cfgmod.RunConfig, args) -> int:
    from .verify import verify

    ver = dict(run["verify"])
    if args.seed is not None:
        ver["seed"] = args.seed
    if args.sizes is not None:
        ver["sizes"] = args.sizes
    cfgmod.validate({**run.values, "verify": ver})
    verdict = verify(ver["sizes"], ver["p"], ver["u_attn"], ver["seed"], ver["heads"],
                     ver["head_dim"], ver["tol_forward"], ver["tol_grad"])
    verdict.update(_header(run, "verify"))
    if args.stats:
        print(f"residency high-water (strict forward): {verdict['residency_highwater']}",
              file=sys.stderr)
        print(f"residency high-water (double-buffered): "
              f"{verdict['residency_highwater_double_buffer']}", file=sys.stderr)
    _emit(verdict, args.out)
    return EXIT_OK if verdict["passed"] else EXIT_FAIL


def cmd_mem_report(run: cfgmod.RunConfig, args) -> int:
    from .memory import StepCoeffs, activation_peak, report_csv, report_rows

    tc = run.train_config()
    if args.u is not None:
        tc = tc.with_(u_attn=args.u)
    if args.format == "csv":
        text = report_csv(tc)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(text)
        print(text, end="")
        return EXIT_OK
    led = activation_peak(tc)
    doc = _header(run, "mem-report")
    doc.update({"coefficients": StepCoeffs().table(), "u_attn": tc.u_attn, "u_ffn": led.u_ffn,
                "rows": report_rows(tc), "peak_activation_bytes": led.peak_activation_bytes,
                "peak_step": list(led.peak_step), "persistent_bytes": led.persistent_bytes,
                "model_state_bytes": led.model_state_bytes,
                "host_bytes_used": led.host_bytes_used, "headroom_bytes": led.headroom})
    _emit(doc, args.out)
    return EXIT_OK


def _plan(run: cfgmod.RunConfig, args):
    from .perfsim import SchedulePlan

    ch = run["chunks"]
    db = ch["double_buffer"] if args.double_buffer is None else args.double_buffer
    return SchedulePlan(s_global=run["parallel"]["s_global"],
                        u=args.u if args.u is not None else ch["u_attn"],
                        p=run["parallel"]["p"], double_buffer=db,
                        rho=ch["sparsity"] if args.sparsity is None else args.sparsity,
                        pass_=args.pass_, model=run.sim_model())


def cmd_simulate(run: cfgmod.RunConfig, args) -> int:
    from .perfsim import simulate, validate_timeline, write_chrome_trace

    plan = _plan(run, args)
    tl = simulate(plan, run.hardware())
    problems = validate_timeline(tl.events)
    if args.trace:
        write_chrome_trace(tl, args.trace)
    doc = _header(run, "simulate")
    doc.update({"chunk": plan.chunk, "u": plan.u, "double_buffer": plan.double_buffer,
                "sparsity": plan.rho, "pass": plan.pass_, **tl.summary(),
                "busy_fraction": {s: tl.busy_fraction(s) for s in tl.busy},
                "timeline_violations": problems})
    _emit(doc, args.out)
    return EXIT_FAIL if problems else EXIT_OK


def cmd_sweep(run: cfgmod.RunConfig, args) -> int:
    from .perfsim import sweep_chunk_size, sweep_csv

    sizes = args.sizes or run["chunks"]["sweep_sizes"]
    db = run["chunks"]["double_buffer"] if args.double_buffer is None else args.double_buffer
    rows, best = sweep_chunk_size(run.train_config(), run.hardware(), sizes, double_buffer=db,
                                  rho=run["chunks"]["sparsity"])
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(sweep_csv(rows))
    doc = _header(run, "sweep")
    doc.update({"rows": [vars(r) for r in rows], "argmax_chunk": best,
                "interior_argmax": best not in (min(sizes), max(sizes))})
    _emit(doc, args.out)
    return EXIT_OK


def cmd_crossover(run: cfgmod.RunConfig, args) -> int:
    from .perfsim import crossover_chunk_size, crossover_closed_form, crossover_scan

    hw, model, p = run.hardware(), run.sim_model(), run["parallel"]["p"]
    doc = _header(run, "crossover")
    doc.update({"crossover_chunk": crossover_chunk_size(hw, model, p),
                "closed_form_tokens": crossover_closed_form(hw, model, p),
                "scan_chunk": crossover_scan(hw, model, p)})
    _emit(doc, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fpdt", description=__doc__)
    ap.add_argument("--config", help=f"TOML run config (else ${cfgmod.CONFIG_ENV}, else shipped default)")
    ap.add_argument("--explain", action="store_true", help="print the resolved config with defaults and exit")
    sub = ap.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--out", help="also write the JSON output here")

    v = sub.add_parser("verify", help="chunked block vs monolithic oracle")
    v.add_argument("--seed", type=int)
    v.add_argument("--sizes", type=_sizes, help="comma-separated global sequence lengths")
    v.add_argument("--stats", action="store_true", help="print residency high-water marks")
    common(v)

    m = sub.add_parser("mem-report", help="per-step activation memory table")
    m.add_argument("--format", choices=("csv", "json"), default="csv")
    m.add_argument("--u", type=int, help="override u_attn")
    common(m)

    for name, help_ in (("simulate", "simulate one schedule"), ("sweep", "MFU over chunk sizes")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--double-buffer", type=_onoff, dest="double_buffer", metavar="{on,off}")
        common(s)
        if name == "simulate":
            s.add_argument("--u", type=int, help="override u_attn")
            s.add_argument("--sparsity", type=float)
            s.add_argument("--pass", dest="pass_", choices=("fwd", "bwd", "both"), default="both")
            s.add_argument("--trace", help="write a Chrome trace-event JSON here")
        else:
            s.add_argument("--sizes", type=_sizes)
            s.add_argument("--csv", help="write the sweep rows as CSV here")

    c = sub.add_parser("crossover", help="fetch/compute crossover chunk length")
    common(c)
    return ap


COMMANDS = {"verify": cmd_verify, "mem-report": cmd_mem_report, "simulate": cmd_simulate,
            "sweep": cmd_sweep, "crossover": cmd_crossover}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        run = cfgmod.load(args.config)
        if args.explain:
            print(cfgmod.explain(run))
            return EXIT_OK
        if not args.command:
            ap.print_help()
            return EXIT_CONFIG
        return COMMANDS[args.command](run, args)
    except (ConfigError, ValueError) as exc:
        print(f"fpdt: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
