"""Command-line entry point: ``esscale {run,coord,worker,exp}``."""
from __future__ import annotations

import argparse
import errno
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path

from esscale import PROTO_VERSION, __version__, kernels, training
from esscale.config import ConfigError, RunConfig, defaults, load_config, validate
from esscale.estimator import NumericError
from esscale.estimator import ProtocolError as FoldProtocolError

log = logging.getLogger("esscale")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PORT_IN_USE = 3
EXIT_QUORUM = 4
EXIT_NUMERIC = 5
EXIT_CONSISTENCY = 6
EXIT_PROTOCOL = 7
EXIT_INTERRUPTED = 130

EPILOG = f"""\
exit codes:
  {EXIT_OK}    clean completion
  {EXIT_FAILURE}    unexpected failure
  {EXIT_CONFIG}    configuration error (bad file, unknown key, invalid value)
  {EXIT_PORT_IN_USE}    coordinator port already in use
  {EXIT_QUORUM}    not enough workers joined before the timeout
  {EXIT_NUMERIC}    numeric abort (non-finite return, gradient or parameters)
  {EXIT_CONSISTENCY}    a worker's update checksum disagreed with the coordinator
  {EXIT_PROTOCOL}    malformed message or rejected handshake
  {EXIT_INTERRUPTED}  stopped by a signal before finishing (state was checkpointed)

environment:
  ES_COORD_ADDR     host:port a worker connects to (overrides [distrib])
  ESSCALE_PURE_PYTHON=1   force the pure-Python kernels
"""


class StopFlag:
    """Set by SIGINT/SIGTERM so loops can finish the current step and flush."""

    def __init__(self):
        self.event = threading.Event()

    def __call__(self) -> bool:
        return self.event.is_set()

    def install(self):
        if threading.current_thread() is not threading.main_thread():
            return
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, self._handle)

    def _handle(self, signum, _frame):
        log.warning("received signal %d, shutting down after the current step", signum)
        self.event.set()


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else defaults()
    if getattr(args, "seed", None) is not None:
        cfg.sections["run"]["seed"] = args.seed
    if getattr(args, "updates", None) is not None:
        cfg.sections["run"]["updates"] = args.updates
    if getattr(args, "out", None) is not None:
        cfg.sections["run"]["out"] = args.out
    return validate(cfg)


def cmd_run(args, stop) -> int:
    cfg = _load(args)
    state = training.run_single(cfg, resume=args.resume, stop=stop)
    log.info("finished at t=%d checksum=%016x", state.t, state.checksum())
    return EXIT_INTERRUPTED if stop() else EXIT_OK


def coord_address(cfg: RunConfig) -> tuple[str, int]:
    return cfg["distrib"]["host"], cfg["distrib"]["port"]


def cmd_coord(args, stop) -> int:
    from esscale.distrib.coordinator import Coordinator
    from esscale.distrib.transport import TcpListener

    cfg = _load(args)
    es = cfg.es_config()
    problem = training.make_problem(cfg)
    table = training.table_for(cfg)
    out_dir = Path(cfg["run"]["out"])
    progress = training.ProgressLog(out_dir / "progress.jsonl")
    every = cfg["run"]["checkpoint_every"]
    timesteps = 0
    logged = 0
    if args.resume and (out_dir / training.CHECKPOINT_NAME).exists():
        state, timesteps = training.load_checkpoint(out_dir)
        logged = max((r["t"] for r in progress.read()), default=0)
    else:
        state = training.initial_state(cfg, problem)
        if progress.path.exists():
            progress.path.unlink()
    host, port = coord_address(cfg)
    try:
        listener = TcpListener(host, port)
    except OSError as exc:
        if exc.errno == errno.EADDRINUSE:
            log.error("port %d on %s is already in use", port, host)
            return EXIT_PORT_IN_USE
        raise
    log.info("coordinator listening on %s:%d for %d workers", host, listener.address[1],
             cfg["distrib"]["workers"])
    total = [timesteps]

    def on_generation(st, results, ms):
        total[0] += sum(r.steps for r in results)
        if st.t > logged:
            progress.append(training.progress_record(st, results, ms, total[0]))
        if st.t % every == 0:
            training.save_checkpoint(out_dir, st, total[0])

    coord = Coordinator(es, table, state, cfg["run"]["seed"], listener, cfg["distrib"]["workers"],
                        join_timeout=cfg["distrib"]["timeout"], on_generation=on_generation)
    try:
        state = coord.run(cfg["run"]["updates"], stop=stop)
    finally:
        training.save_checkpoint(out_dir, coord.state, total[0])
    log.info("finished at t=%d checksum=%016x", state.t, state.checksum())
    return EXIT_INTERRUPTED if stop() else EXIT_OK


def worker_address(cfg: RunConfig, override: str | None = None) -> tuple[str, int]:
    addr = override or os.environ.get("ES_COORD_ADDR")
    if not addr:
        return coord_address(cfg)
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"coordinator address must be host:port, got {addr!r}")
    return host, int(port)


def cmd_worker(args, stop) -> int:
    from esscale.distrib.transport import tcp_connect
    from esscale.distrib.worker import Worker, serve_forever

    cfg = _load(args)
    es = cfg.es_config()
    problem = training.make_problem(cfg)
    table = training.table_for(cfg)
    host, port = worker_address(cfg, args.connect)
    log.info("worker connecting to %s:%d", host, port)
    state = serve_forever(lambda: tcp_connect(host, port),
                          lambda ch: Worker(es, table, problem, ch, worker_id=os.getpid()),
                          retries=args.retries, stop=stop)
    if state is not None:
        log.info("worker done at t=%d checksum=%016x", state.t, state.checksum())
    return EXIT_OK if state is not None else EXIT_INTERRUPTED


def cmd_exp(args, stop) -> int:
    from esscale import config as config_mod
    from esscale import experiments as ex

    cfg = _load(args)
    out = Path(cfg["run"]["out"])
    seed = cfg["run"]["seed"]
    name = args.experiment
    if name == "variance":
        reports = ex.variance_sweep(seed=seed, out=out / "variance.csv")
        for r in reports:
            print(f"T={r.T:<5d} {r.kind}  var_mean={r.var_mean:.6g}  n={r.n}")
    elif name == "dupfeat":
        rep = ex.dup_feature_check(seed=seed, out=out / "dupfeat.csv")
        print(f"sigma/sqrt2, alpha/2: max prediction divergence {rep.max_divergence:.3g}")
        print(f"sigma/2,     alpha/2: max prediction divergence {rep.max_divergence_halving:.3g}")
    elif name == "frameskip":
        base = cfg if cfg["env"]["name"] == "pole" and args.config else \
            config_mod.parse(ex.FRAMESKIP_CONFIG)
        res = ex.frameskip_sweep(base=base, out=out / "frameskip.csv")
        for k, m in res["median"].items():
            print(f"skip={k}  median updates to threshold {m}")
    elif name == "scaling":
        res = ex.scaling_bench(seed=seed, out=out / "scaling.csv")
        for w, ms, eff in res["rows"]:
            print(f"workers={w}  gen_ms={ms:.1f}  efficiency={eff:.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esscale", description="Evolution strategies with a shared noise table.",
        epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version",
                        version=f"esscale {__version__} proto_version {PROTO_VERSION} "
                                f"kernels {kernels.BACKEND}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, overrides=True):
        p.add_argument("--config", metavar="PATH", help="run configuration file")
        if overrides:
            p.add_argument("--seed", type=int)
            p.add_argument("--updates", type=int)
            p.add_argument("--out", metavar="DIR")

    p = sub.add_parser("run", help="single-process training loop",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("coord", help="distributed coordinator (TCP)",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_coord)

    p = sub.add_parser("worker", help="distributed worker (TCP)",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    common(p)
    p.add_argument("--connect", metavar="HOST:PORT",
                   help="coordinator address (default: ES_COORD_ADDR, then [distrib])")
    p.add_argument("--retries", type=int, default=5)
    p.set_defaults(func=cmd_worker)

    p = sub.add_parser("exp", help="run an analysis and write its CSV under --out",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("experiment", choices=("variance", "dupfeat", "frameskip", "scaling"))
    common(p)
    p.set_defaults(func=cmd_exp)
    return parser


def main(argv=None) -> int:
    from esscale.distrib.coordinator import ConsistencyError, QuorumError
    from esscale.distrib.protocol import ProtocolError
    from esscale.distrib.worker import Rejected

    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    stop = StopFlag()
    stop.install()
    start = time.perf_counter()
    try:
        code = args.func(args, stop)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except QuorumError as exc:
        log.error("quorum failure: %s", exc)
        return EXIT_QUORUM
    except ConsistencyError as exc:
        log.error("consistency failure: %s", exc)
        return EXIT_CONSISTENCY
    except (ProtocolError, FoldProtocolError, Rejected) as exc:
        log.error("protocol error: %s", exc)
        return EXIT_PROTOCOL
    except (NumericError, ArithmeticError) as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC
    except ConnectionError as exc:
        log.error("connection failure: %s", exc)
        return EXIT_FAILURE
    log.info("%s done in %.1fs", args.command, time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
