"""Command line entry point: ``lepcnn <command> ...``."""

import argparse
import asyncio
import csv
import logging
import random
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import (AuditFailure, DuplicateKeyError, KeyExhausted, KeyIntegrityError, LepError,
                     ModelFormatError, ParameterViolation, ProtocolError, RangeError)
from .fixedpoint import decode_array, encode_array
from .integrity import (AdversaryConfig, LayerAuditor, as_fraction, corrupt, detection_probability,
                        make_plan, min_sample_rate)
from .keyfile import build_batch, dump_keyset
from .keystore import KeyStore, capacity_range
from .masking import SecureMaskSource, SeededMaskSource, generate_keyset
from .metrics import analyze
from .model import (MAGIC, NetworkSpec, alexnet, load_model, parse_arch, quantize_params, random_params,
                    save_model, validate_model)
from .tensor import ConvSpec, FcParams, FcSpec, Tensor3

log = logging.getLogger("lepcnn")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_KEYS_EXHAUSTED = 3
EXIT_AUDIT_FAILED = 4
EXIT_PROTOCOL = 5
EXIT_PARAMETER = 6
EXIT_KEY_INTEGRITY = 7


# ---------------------------------------------------------------- flag parsing

def _kv_value(text, key):
    """``key=value`` -> value; a bare value is accepted too."""
    name, sep, value = text.partition("=")
    if not sep:
        return text
    if name.strip() != key:
        raise argparse.ArgumentTypeError(f"expected {key}=<value>, got {text!r}")
    return value


def audit_flag(text):
    """``r=0.01`` (all conv layers) or ``r=0.002,0.003,...`` (one rate per conv layer)."""
    value = _kv_value(text, "r")
    try:
        rates = [as_fraction(v.strip()) for v in value.split(",") if v.strip()]
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad sample rate in {text!r}") from None
    if not rates or any(not 0 <= r <= 1 for r in rates):
        raise argparse.ArgumentTypeError(f"sample rates must lie in [0, 1]: {text!r}")
    return rates[0] if len(rates) == 1 else rates


def theta_flag(text):
    try:
        theta = as_fraction(_kv_value(text, "theta"))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad error rate {text!r}") from None
    if not 0 <= theta <= 1:
        raise argparse.ArgumentTypeError(f"theta must lie in [0, 1]: {text!r}")
    return theta


def rate_list(text):
    return [as_fraction(v) for v in text.split(",") if v]


def rate_grid(text):
    """``start:stop:step`` inclusive, exact."""
    try:
        start, stop, step = (Fraction(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:step, got {text!r}") from None
    if step <= 0:
        raise argparse.ArgumentTypeError("grid step must be positive")
    out, r = [], start
    while r <= stop:
        out.append(r)
        r += step
    return out


def _fmt_rate(r):
    return format(float(r), ".6g")


def load_net(path):
    """Network (and params when present) from an LEPM model or a text architecture."""
    if path in (None, "alexnet"):
        return alexnet(), None
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        net, params, _ = load_model(path)
        return net, params
    return parse_arch(data.decode("utf-8")), None


def _require_model(path):
    net, params = load_net(path)
    if params is None:
        raise ModelFormatError(f"{path} has no weights; compile it with 'compile-model' first")
    return net, params


# ---------------------------------------------------------------- commands

def cmd_compile_model(args):
    net = parse_arch(Path(args.arch).read_text())
    if args.weights:
        with np.load(args.weights) as z:
            real = {i: (z[f"w{i}"], z[f"b{i}"]) for i in net.linear_indices()}
        params = quantize_params(net, real)
    else:
        rng = np.random.default_rng(args.seed)
        params = random_params(net, rng, args.weight_range, args.bias_range)
    validate_model(net, params)
    digest = save_model(args.output, net, params)
    print(f"wrote {args.output}: {len(net.layers)} layers, digest {digest.hex()}")


def cmd_keygen(args):
    net, params = _require_model(args.model)
    validate_model(net, params)
    source = SeededMaskSource(args.seed) if args.seed is not None else SecureMaskSource()
    files = []
    for i in range(args.count):
        ks = generate_keyset(net, params, source)
        files.append(dump_keyset(ks))
        log.info("key set %d/%d: %s", i + 1, args.count, ks.hex_id)
    batch = build_batch(files)
    Path(args.output).write_bytes(batch)
    print(f"wrote {args.count} key sets ({len(batch)} bytes) to {args.output}")


def cmd_replenish(args):
    store = KeyStore(args.keystore)
    added = store.replenish(args.batch)
    print(f"added {added} key sets; {len(store)} available")


def cmd_serve(args):
    from .protocol import EdgeCore, EdgeServer, parse_endpoint

    net, params = _require_model(args.model)
    adversary = AdversaryConfig(args.dishonest) if args.dishonest is not None else None
    rng = random.Random(args.seed) if args.seed is not None else None
    core = EdgeCore(net, params, adversary=adversary, rng=rng)
    host, port = parse_endpoint(args.bind)
    server = EdgeServer(core, host, port)

    async def run():
        await server.start()
        h, p = server.address
        print(f"listening on {h}:{p} model {core.digest.hex()}"
              + (f" (dishonest, theta={_fmt_rate(adversary.theta)})" if adversary else ""), flush=True)
        await server.serve_forever()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass


def _read_input(args, net):
    if args.input:
        x = np.load(args.input)
        if np.issubdtype(x.dtype, np.floating):
            x = encode_array(x, net.fp)
        x = x.astype(object)
    else:
        rng = np.random.default_rng(args.seed)
        bound = args.input_range
        x = rng.integers(-bound, bound + 1, size=net.input_shape).astype(object)
    if x.shape != tuple(net.input_shape):
        raise ParameterViolation(f"input shape {x.shape} does not match the model input {net.input_shape}")
    return Tensor3(x) if x.ndim == 3 else x


def cmd_infer(args):
    from .protocol import infer_offloaded

    net, params = _require_model(args.model)
    x = _read_input(args, net)
    store = KeyStore(args.keystore)
    rng = random.Random(args.seed) if args.seed is not None else None
    out, report = infer_offloaded(x, net, params, store, args.endpoint, audit=args.audit, rng=rng)
    if args.output:
        np.save(args.output, np.asarray(out, dtype=object), allow_pickle=True)
    values = decode_array(out, net.fp, net.output_scale_exponent()) if args.decode else out
    for v in values:
        print(v)
    for r in report.layers:
        print(f"audit layer {r.layer_index}: {r.samples} samples, passed", file=sys.stderr)
    print(f"{len(store)} key sets left", file=sys.stderr)


def cmd_analyze(args):
    net, _ = load_net(args.model)
    report = analyze(net, audit=args.audit, theta=args.theta)
    text = report.to_csv() if args.format == "csv" else report.to_text()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.capacity_gb:
        lo, hi = capacity_range(net, args.capacity_gb)
        print(f"{args.capacity_gb} GB of key storage: {lo} requests (10^9 B) to {hi} requests (2^30 B)",
              file=sys.stderr)


def cmd_detect(args):
    if args.alexnet:
        sizes = [alexnet().layers[i].out_size for i in alexnet().conv_indices()]
    else:
        sizes = args.N
    if not sizes:
        raise ParameterViolation("give --N or --alexnet")
    w = csv.writer(sys.stdout, lineterminator="\n")
    if args.target is not None:
        w.writerow(["N", "theta", "target", "min_r", "pr_ed"])
        for N in sizes:
            for theta in args.theta:
                r = min_sample_rate(N, theta, args.target, step=args.step)
                w.writerow([N, _fmt_rate(theta), args.target, _fmt_rate(r),
                            f"{detection_probability(N, theta, r):.6f}"])
        return
    w.writerow(["N", "theta", "r", "pr_ed"])
    for N in sizes:
        for theta in args.theta:
            for r in args.r:
                w.writerow([N, _fmt_rate(theta), _fmt_rate(r), f"{detection_probability(N, theta, r):.6f}"])


def _simulation_layer(args, np_rng):
    if args.N:
        spec = FcSpec(8, args.N)
        params = FcParams(np_rng.integers(-100, 101, size=(8, args.N), dtype=np.int32),
                          np.zeros(args.N, dtype=np.int64))
        net = NetworkSpec((1, 1, 8), [spec])
        return net, {0: params}, 0
    net, params = _require_model(args.model)
    idx = args.layer if args.layer is not None else net.conv_indices()[0]
    if idx not in params:
        raise ParameterViolation(f"layer {idx} is not a conv/fc layer")
    return net, params, idx


def cmd_simulate(args):
    """Monte-Carlo detection rate against the analytic value.

    The honest layer output is fetched once from a loopback edge; each trial
    then applies a fresh ``corrupt`` (what a dishonest edge does) and a fresh
    audit plan.
    """
    from .protocol import EdgeClient, EdgeCore, EdgeServer

    np_rng = np.random.default_rng(args.seed)
    rng = random.Random(args.seed)
    net, params, idx = _simulation_layer(args, np_rng)
    spec = net.layers[idx]
    masked = SeededMaskSource(np_rng.integers(1 << 62)).draw(spec.in_size, net.fp.lam).reshape(spec.in_shape)
    kind = "conv" if isinstance(spec, ConvSpec) else "fc"
    core = EdgeCore(net, params)
    with EdgeServer(core) as server, EdgeClient(server.address, core.digest) as client:
        honest = client.run_job(idx, kind, masked).elements
    if kind == "conv":
        masked, honest = Tensor3(masked), Tensor3(honest)
    auditor = LayerAuditor(masked, spec, params[idx])
    adversary = AdversaryConfig(args.theta)
    detected = samples = 0
    for _ in range(args.trials):
        returned = corrupt(honest, adversary, rng, lam=net.fp.lam)
        plan = make_plan(spec.out_size, args.r, rng)
        samples = plan.sample_count
        if not auditor.audit(returned, plan, idx).passed:
            detected += 1
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["layer", "N", "theta", "r", "samples", "trials", "detected", "empirical", "predicted"])
    w.writerow([idx, spec.out_size, _fmt_rate(args.theta), _fmt_rate(args.r), samples, args.trials,
                detected, f"{detected / args.trials:.6f}" if args.trials else "nan",
                f"{detection_probability(spec.out_size, args.theta, args.r):.6f}"])


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="lepcnn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile-model", help="compile a text architecture into an LEPM model file")
    c.add_argument("arch")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--weights", help="npz with real-valued w<i>, b<i> per conv/fc layer index")
    c.add_argument("--seed", type=int, help="seed for random weights when --weights is absent")
    c.add_argument("--weight-range", type=int, help="bound |w| of random weights")
    c.add_argument("--bias-range", type=int)
    c.set_defaults(func=cmd_compile_model)

    c = sub.add_parser("keygen", help="offline phase: write a batch of one-time key sets")
    c.add_argument("--model", required=True)
    c.add_argument("--count", type=int, default=1)
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--seed", type=int, help="deterministic masks; needs --insecure-test-keys")
    c.add_argument("--insecure-test-keys", action="store_true")
    c.set_defaults(func=cmd_keygen)

    c = sub.add_parser("replenish", help="import a key batch into a keystore")
    c.add_argument("--keystore", required=True)
    c.add_argument("batch")
    c.set_defaults(func=cmd_replenish)

    c = sub.add_parser("serve", help="run the edge daemon")
    c.add_argument("--model", required=True)
    c.add_argument("--bind", default="127.0.0.1:7450")
    c.add_argument("--dishonest", type=theta_flag, metavar="theta=F",
                   help="test edge: corrupt a theta fraction of every result")
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_serve)

    c = sub.add_parser("infer", help="run one offloaded inference")
    c.add_argument("--model", required=True)
    c.add_argument("--keystore", required=True)
    c.add_argument("--endpoint", default="127.0.0.1:7450")
    c.add_argument("--input", help=".npy input; floats are fixed-point encoded")
    c.add_argument("--input-range", type=int, default=100, help="bound of the random input when --input is absent")
    c.add_argument("--audit", type=audit_flag, metavar="r=RATE[,RATE...]")
    c.add_argument("--seed", type=int)
    c.add_argument("--decode", action="store_true", help="print real values instead of fixed-point integers")
    c.add_argument("-o", "--output", help="also save the output vector as .npy")
    c.set_defaults(func=cmd_infer)

    c = sub.add_parser("analyze", help="FLOP / communication / storage report")
    c.add_argument("--model", default="alexnet", help="LEPM model, text architecture, or 'alexnet'")
    c.add_argument("--audit", type=audit_flag, metavar="r=RATE[,RATE...]")
    c.add_argument("--theta", type=theta_flag, default=None)
    c.add_argument("--format", choices=["text", "csv"], default="text")
    c.add_argument("--capacity-gb", type=int, default=0)
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_analyze)

    c = sub.add_parser("detect", help="detection probability grid as CSV")
    c.add_argument("--N", type=int, nargs="*", default=[])
    c.add_argument("--alexnet", action="store_true", help="use the five AlexNet conv output sizes")
    c.add_argument("--theta", type=rate_list, default=[Fraction(1, 100)])
    c.add_argument("--r", type=rate_grid, default=rate_grid("0.001:0.02:0.001"), metavar="START:STOP:STEP")
    c.add_argument("--target", type=float, help="report the smallest grid rate reaching this probability")
    c.add_argument("--step", type=Fraction, default=Fraction(1, 10000))
    c.set_defaults(func=cmd_detect)

    c = sub.add_parser("simulate", help="Monte-Carlo detection rate against a dishonest edge")
    c.add_argument("--model")
    c.add_argument("--layer", type=int)
    c.add_argument("--N", type=int, help="synthetic fc layer with N outputs instead of a model layer")
    c.add_argument("--theta", type=theta_flag, required=True)
    c.add_argument("--r", type=audit_flag, required=True)
    c.add_argument("--trials", type=int, default=1000)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "keygen":
        if args.seed is not None and not args.insecure_test_keys:
            parser.error("--seed makes key material predictable; add --insecure-test-keys to allow it")
        if args.count < 0:
            parser.error("--count must be non-negative")
    if args.command == "simulate":
        if not (args.N or args.model):
            parser.error("simulate needs --model or --N")
        if isinstance(args.r, list):
            parser.error("simulate takes a single sample rate")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except KeyExhausted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_KEYS_EXHAUSTED
    except AuditFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUDIT_FAILED
    except (ProtocolError, ConnectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ParameterViolation, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAMETER
    except (KeyIntegrityError, DuplicateKeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_KEY_INTEGRITY
    except (LepError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
