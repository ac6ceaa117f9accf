"""Command-line front end: run benchmarks, fit models, predict, validate.

Exit codes: 0 success, 1 usage or malformed input, 2 transport or runtime
failure, 3 integrity failure.  The env var SECMSG_KEY overrides --key.
Summaries are plain text on stdout; machine output is CSV/JSON files.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import benchmarks, models
from .aead import IntegrityError, ProviderError, SecretKey, available_backends, create_provider
from .benchmarks import (
    BenchmarkResult,
    ENCDEC_ITERATIONS,
    LatencySample,
    MULTIPAIR_ITERATIONS,
    MULTIPAIR_WINDOW,
    COLLECTIVE_ITERATIONS,
    StopPolicy,
    read_samples_csv,
    write_samples_csv,
)
from .models import (
    ENCDEC_PRESETS,
    PRESETS,
    FitError,
    ParameterSet,
    compose_enhanced,
    load_params,
    phase_for,
    save_params,
    size_class_for,
)
from .transport import ProcessGroup, TransportError, read_roster

DEFAULT_KEY = bytes(range(32))

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_INTEGRITY = 3


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep usage failures on exit code 1
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}")
    if not values or any(v < 0 for v in values):
        raise UsageError(f"expected nonnegative integers, got {text!r}")
    return values


def _resolve_key(args) -> SecretKey:
    text = os.environ.get("SECMSG_KEY") or getattr(args, "key", None)
    if not text:
        return SecretKey(DEFAULT_KEY)
    return SecretKey.from_hex(text)


def _stop_policy(args, *, min_runs: int | None = None) -> StopPolicy:
    base = StopPolicy()
    resolved_min = args.min_runs if args.min_runs is not None else (min_runs or base.min_runs)
    budget = args.budget if args.budget is not None else base.hard_budget
    if args.max_runs is not None:
        max_runs = args.max_runs
    else:
        # only the budget was lowered: shrink phase 1 to fit inside it
        max_runs = min(base.max_runs_phase1, budget)
    return StopPolicy(
        min_runs=min(resolved_min, max_runs),
        max_runs_phase1=max_runs,
        cv_target=args.cv if args.cv is not None else base.cv_target,
        hard_budget=budget,
    )


def _resolve_preset(name: str, flavor: str) -> ParameterSet:
    if name in PRESETS:
        return PRESETS[name]
    if name.endswith("-rendezvous") and name[: -len("-rendezvous")] in ("ethernet", "ib"):
        return PRESETS[name[: -len("-rendezvous")] + "-pingpong"]
    if name in ("ethernet", "ib"):
        return PRESETS[f"{name}-{flavor}"]
    known = ", ".join(sorted(PRESETS) + ["ethernet", "ib", "ethernet-rendezvous", "ib-rendezvous"])
    raise UsageError(f"unknown preset {name!r} (have: {known})")


def _load_parameter_set(args, flavor: str) -> ParameterSet:
    if getattr(args, "params", None):
        ps = load_params(args.params)
    elif getattr(args, "preset", None):
        ps = _resolve_preset(args.preset, flavor)
    else:
        raise UsageError("either --params or --preset is required")
    enc_name = getattr(args, "enc", None)
    if enc_name:
        if enc_name not in ENCDEC_PRESETS:
            raise UsageError(
                f"unknown encrypt-decrypt preset {enc_name!r} "
                f"(have: {', '.join(sorted(ENCDEC_PRESETS))})"
            )
        ps = ps.with_encdec(ENCDEC_PRESETS[enc_name])
    return ps


# -- bench ----------------------------------------------------------------


def _summary_header() -> str:
    return (
        f"{'size_bytes':>10} {'k':>3} {'runs':>5} {'mean_us':>12} "
        f"{'stddev_us':>11} {'MB_per_s':>10} {'stop':>10}"
    )


def _summary_line(size: int, k: int, res: BenchmarkResult, mbps: float | None) -> str:
    mbps_text = f"{mbps:10.2f}" if mbps is not None else f"{'-':>10}"
    return (
        f"{size:>10} {k:>3} {res.run_count:>5} {res.mean:>12.3f} "
        f"{res.stddev:>11.3f} {mbps_text} {res.stop_reason.value:>10}"
    )


def _open_group(args, *, encrypted: bool) -> ProcessGroup:
    if not args.roster or args.rank is None:
        raise UsageError("this benchmark needs --roster and --rank")
    try:
        roster = read_roster(args.roster)
    except (OSError, ValueError) as exc:
        raise UsageError(f"bad roster: {exc}")
    provider = None
    if encrypted:
        provider = create_provider(args.backend, _resolve_key(args))
    return ProcessGroup(
        args.rank, roster, provider=provider, threshold=args.threshold
    )


def cmd_bench(args) -> int:
    encrypted = not args.plaintext
    collected: list[LatencySample] = []
    lines: list[str] = []

    if args.kind == "encdec":
        policy = _stop_policy(args, min_runs=benchmarks.ENCDEC_STOP_POLICY.min_runs)
        iterations = max(1, round(ENCDEC_ITERATIONS * args.scale))
        key = _resolve_key(args)
        for size in args.sizes:
            for k in args.threads:
                res = benchmarks.run_until_stable(
                    lambda: benchmarks.encdec_bench(
                        size,
                        iterations,
                        threads=k,
                        backend=args.backend,
                        key=key.data,
                        payload_seed=args.seed,
                    ),
                    policy,
                    message_size=size,
                    k_pairs=k,
                )
                collected.extend(res.samples)
                mbps = benchmarks.throughput(size, res.mean) if size > 0 else None
                lines.append(_summary_line(size, k, res, mbps))
        _emit(args, collected, lines)
        return EXIT_OK

    policy = _stop_policy(args)
    with _open_group(args, encrypted=encrypted) as g:
        if args.kind == "pingpong":
            for size in args.sizes:
                rounds = benchmarks.default_pingpong_rounds(size, args.scale)
                res = benchmarks.run_until_stable_group(
                    g,
                    lambda: benchmarks.pingpong(
                        g, size, rounds, encrypted=encrypted, payload_seed=args.seed
                    ),
                    policy,
                    message_size=size,
                    k_pairs=1,
                )
                if g.rank == 0 and res is not None:
                    collected.extend(res.samples)
                    mbps = benchmarks.throughput(size, res.mean) if size > 0 else None
                    lines.append(_summary_line(size, 1, res, mbps))
        elif args.kind == "multipair":
            iterations = max(1, round(MULTIPAIR_ITERATIONS * args.scale))
            for size in args.sizes:
                for k in args.pairs:
                    res = benchmarks.run_until_stable_group(
                        g,
                        lambda: benchmarks.multipair(
                            g, k, size, iterations, encrypted=encrypted, payload_seed=args.seed
                        ),
                        policy,
                        message_size=size,
                        k_pairs=k,
                    )
                    if g.rank == 0 and res is not None:
                        collected.extend(res.samples)
                        aggregate = (
                            benchmarks.throughput(size, res.mean) * MULTIPAIR_WINDOW * k
                            if size > 0
                            else None
                        )
                        lines.append(_summary_line(size, k, res, aggregate))
        else:  # collective
            iterations = max(1, round(COLLECTIVE_ITERATIONS * args.scale))
            for size in args.sizes:
                res = benchmarks.run_until_stable_group(
                    g,
                    lambda: benchmarks.collective_bench(
                        g,
                        args.op,
                        size,
                        iterations,
                        encrypted=encrypted,
                        payload_seed=args.seed,
                    ),
                    policy,
                    message_size=size,
                    k_pairs=g.size,
                )
                if g.rank == 0 and res is not None:
                    collected.extend(res.samples)
                    mbps = benchmarks.throughput(size, res.mean) if size > 0 else None
                    lines.append(_summary_line(size, g.size, res, mbps))
        if g.rank == 0:
            _emit(args, collected, lines)
    return EXIT_OK


def _emit(args, samples: list[LatencySample], lines: list[str]) -> None:
    if args.out:
        write_samples_csv(args.out, samples)
        print(f"wrote {len(samples)} samples to {args.out}")
    print(_summary_header())
    for line in lines:
        print(line)


# -- fit -------------------------------------------------------------------


def _print_line_table(rows: list[tuple[str, float, float]]) -> None:
    print(f"{'':<14} {'alpha_us':>10} {'beta_us_per_byte':>18}")
    for label, alpha, beta in rows:
        print(f"{label:<14} {alpha:>10.4f} {beta:>18.6e}")


def cmd_fit(args) -> int:
    samples = read_samples_csv(args.input)
    if args.model == "hockney":
        report = models.fit_hockney_report(samples, args.threshold)
        p = report.params
        _print_line_table(
            [
                ("eager", p.eager.alpha_us, p.eager.beta_us_per_byte),
                ("rendezvous", p.rendezvous.alpha_us, p.rendezvous.beta_us_per_byte),
            ]
        )
        print(f"threshold_bytes {p.threshold_bytes}")
        for phase in sorted(f.value for f in report.fallback_phases):
            print(f"note: negative intercept in the {phase} phase; "
                  f"1-byte fallback applied")
        ps = ParameterSet(hockney=p)
    elif args.model == "encdec":
        report = models.fit_encdec_line_report(samples)
        p = report.params
        _print_line_table([("encdec", p.alpha_us, p.beta_us_per_byte)])
        if report.fallback:
            print("note: negative intercept; 1-byte fallback applied")
        ps = ParameterSet(encdec=p)
    else:  # maxrate
        mr = models.fit_maxrate(samples)
        print(f"{'class':<10} {'alpha_us':>10} {'A_B_per_us':>12} {'B_B_per_us':>12}")
        for label, c in (("small", mr.small), ("moderate", mr.moderate), ("large", mr.large)):
            print(
                f"{label:<10} {c.alpha_us:>10.4f} {c.a_bytes_per_us:>12.4f} "
                f"{c.b_bytes_per_us:>12.4f}"
            )
        ps = ParameterSet(maxrate=mr)
    if args.out:
        save_params(args.out, ps)
        print(f"wrote parameters to {args.out}")
    return EXIT_OK


# -- predict ----------------------------------------------------------------


def cmd_predict(args) -> int:
    flavor = "multipair" if (args.mode == "multipair" or (args.mode == "overhead" and args.pairs)) else "pingpong"
    ps = _load_parameter_set(args, flavor)

    if args.mode == "single":
        if ps.hockney is None:
            raise UsageError("single prediction needs a hockney section")
        if args.size is None:
            raise UsageError("single prediction needs --size")
        model = ps.hockney
        kind = "plaintext"
        if ps.encdec is not None and not args.plaintext:
            model = compose_enhanced(ps.hockney, ps.encdec)
            kind = "encrypted"
        latency = models.predict_single(model, args.size)
        phase = phase_for(args.size, ps.hockney.threshold_bytes).value
        print(f"mode single ({kind}), size {args.size} B, phase {phase}")
        print(f"predicted latency: {latency:.3f} us")
        if args.size > 0:
            print(f"predicted throughput: {benchmarks.throughput(args.size, latency):.3f} MB/s")
    elif args.mode == "multipair":
        if ps.hockney is None or ps.maxrate is None:
            raise UsageError("multipair prediction needs hockney and maxrate sections")
        if args.size is None or not args.pairs:
            raise UsageError("multipair prediction needs --size and --pairs")
        k = args.pairs[0]
        latency = models.predict_multipair(ps.hockney, ps.maxrate, k, args.size)
        phase = phase_for(args.size, ps.hockney.threshold_bytes).value
        cls = size_class_for(args.size).value
        print(f"mode multipair, k {k}, size {args.size} B, phase {phase}, class {cls}")
        print(f"predicted window latency: {latency:.3f} us")
        print(
            f"predicted aggregate throughput: "
            f"{benchmarks.throughput(args.size, latency) * k:.3f} MB/s"
        )
    elif args.mode == "pipelined":
        if ps.hockney is None or ps.encdec is None:
            raise UsageError("pipelined prediction needs hockney and encdec sections")
        if args.size is None:
            raise UsageError("pipelined prediction needs --size")
        latency = models.predict_pipelined(ps.hockney, ps.encdec, args.size)
        t_comm = models.predict_single(ps.hockney, args.size)
        overhead = latency / t_comm - 1.0
        phase = phase_for(args.size, ps.hockney.threshold_bytes).value
        print(f"mode pipelined, size {args.size} B, phase {phase}")
        print(f"predicted latency: {latency:.3f} us")
        print(f"predicted throughput: {benchmarks.throughput(args.size, latency):.3f} MB/s")
        print(f"overhead versus plaintext: {overhead * 100.0:.1f}%")
    else:  # overhead
        if args.pairs:
            if ps.hockney is None or ps.maxrate is None:
                raise UsageError("multipair overhead needs hockney and maxrate sections")
            k = args.pairs[0]
            size = args.size if args.size is not None else 2 * 1024 * 1024
            cls = ps.maxrate.class_params(size)
            est = models.overhead_multipair_slow(
                ps.hockney.rendezvous.beta_us_per_byte,
                cls,
                k,
                comm=ps.hockney,
                enc=ps.maxrate,
                m=size,
            )
            tag = "" if est.in_regime else " (out of regime: encryption-bound)"
            print(
                f"mode overhead (multipair), k {k}, class {size_class_for(size).value}"
            )
            print(f"predicted overhead: {est.ratio * 100.0:.2f}%{tag}")
        else:
            if ps.hockney is None or ps.encdec is None:
                raise UsageError("single-flow overhead needs hockney and encdec sections")
            ratio = models.overhead_single_large(ps.encdec, ps.hockney.rendezvous)
            print("mode overhead (single flow, large messages, rendezvous phase)")
            print(f"predicted overhead: {ratio * 100.0:.0f}%")
    return EXIT_OK


# -- validate -----------------------------------------------------------------


def cmd_validate(args) -> int:
    samples = read_samples_csv(args.measured)
    flavor = "multipair" if args.mode == "multipair" else "pingpong"
    ps = _load_parameter_set(args, flavor)
    measured = models.mean_latency_by_key(samples)

    predicted: dict[tuple[int, int], float] = {}
    if args.mode == "single":
        if ps.hockney is None:
            raise UsageError("single validation needs a hockney section")
        model = ps.hockney
        if ps.encdec is not None and not args.plaintext:
            model = compose_enhanced(ps.hockney, ps.encdec)
        for size, k in measured:
            predicted[(size, k)] = models.predict_single(model, size)
    else:
        if ps.hockney is None or ps.maxrate is None:
            raise UsageError("multipair validation needs hockney and maxrate sections")
        for size, k in measured:
            predicted[(size, k)] = models.predict_multipair(ps.hockney, ps.maxrate, k, size)

    report = models.validate(measured, predicted)
    print(f"{'size_bytes':>10} {'k':>3} {'predicted_us':>13} {'measured_us':>13} {'rel_error':>10}")
    for e in report.entries:
        print(
            f"{e.message_size:>10} {e.k_pairs:>3} {e.predicted_us:>13.3f} "
            f"{e.measured_us:>13.3f} {e.rel_error:>10.4f}"
        )
    for size, mape in report.mape_by_size.items():
        print(f"MAPE size {size}: {mape:.4f}")
    if report.entries:
        print(f"MAPE overall: {report.mape:.4f}")
    for key in report.missing_predictions:
        print(f"warning: no prediction for (size={key[0]}, k={key[1]})", file=sys.stderr)
    for key in report.missing_measurements:
        print(f"warning: no measurement for (size={key[0]}, k={key[1]})", file=sys.stderr)
    if args.out:
        import csv as _csv

        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = _csv.writer(fh)
            writer.writerow(["size_bytes", "k_pairs", "predicted_us", "measured_us", "rel_error"])
            for e in report.entries:
                writer.writerow(
                    [e.message_size, e.k_pairs, repr(e.predicted_us), repr(e.measured_us), repr(e.rel_error)]
                )
        print(f"wrote report to {args.out}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="secmsg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run a benchmark and write samples CSV")
    bench.add_argument("kind", choices=["pingpong", "multipair", "encdec", "collective"])
    bench.add_argument("--roster", help="roster file of 'rank host port' lines")
    bench.add_argument("--rank", type=int, help="this process's rank")
    bench.add_argument("--backend", default="aes-gcm", choices=available_backends())
    bench.add_argument("--key", help="hex AEAD key (env SECMSG_KEY overrides)")
    bench.add_argument("--sizes", type=_int_list, default=[1024], help="comma list of bytes")
    bench.add_argument("--pairs", type=_int_list, default=[1], help="comma list of pair counts")
    bench.add_argument("--threads", type=_int_list, default=[1], help="comma list of worker counts")
    bench.add_argument("--op", default="alltoall", choices=["alltoall", "allgather", "bcast", "alltoallv"])
    bench.add_argument("--scale", type=float, default=1.0, help="iteration-count multiplier")
    bench.add_argument("--seed", type=int, default=None, help="payload generator seed")
    bench.add_argument("--threshold", type=int, default=131072, help="eager/rendezvous split, bytes")
    bench.add_argument("--plaintext", action="store_true", help="run without encryption")
    bench.add_argument("--out", help="samples CSV path (rank 0 only)")
    bench.add_argument("--min-runs", type=int, default=None)
    bench.add_argument("--max-runs", type=int, default=None)
    bench.add_argument("--cv", type=float, default=None, help="stop when stddev <= cv * mean")
    bench.add_argument("--budget", type=int, default=None, help="hard cap on runs")
    bench.set_defaults(func=cmd_bench)

    fit = sub.add_parser("fit", help="fit model parameters from a samples CSV")
    fit.add_argument("model", choices=["hockney", "encdec", "maxrate"])
    fit.add_argument("--input", required=True, help="samples CSV from 'bench'")
    fit.add_argument("--threshold", type=int, default=131072)
    fit.add_argument("--out", help="parameter JSON path")
    fit.set_defaults(func=cmd_fit)

    predict = sub.add_parser("predict", help="evaluate the models at a point")
    predict.add_argument("--mode", required=True, choices=["single", "multipair", "pipelined", "overhead"])
    predict.add_argument("--params", help="parameter JSON from 'fit'")
    predict.add_argument("--preset", help=f"bundled preset ({', '.join(sorted(PRESETS))}; 'ethernet'/'ib' pick by mode)")
    predict.add_argument("--enc", help=f"encrypt-decrypt preset ({', '.join(sorted(ENCDEC_PRESETS))})")
    predict.add_argument("--size", type=int, default=None, help="message bytes")
    predict.add_argument("--pairs", type=_int_list, default=[], help="pair count (first value used)")
    predict.add_argument("--plaintext", action="store_true", help="predict without encryption cost")
    predict.set_defaults(func=cmd_predict)

    validate = sub.add_parser("validate", help="compare measurements against predictions")
    validate.add_argument("--measured", required=True, help="samples CSV from 'bench'")
    validate.add_argument("--mode", required=True, choices=["single", "multipair"])
    validate.add_argument("--params", help="parameter JSON from 'fit'")
    validate.add_argument("--preset", help="bundled preset name")
    validate.add_argument("--enc", help="encrypt-decrypt preset override")
    validate.add_argument("--plaintext", action="store_true", help="measurements are unencrypted")
    validate.add_argument("--out", help="report CSV path")
    validate.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (TransportError, ProviderError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
