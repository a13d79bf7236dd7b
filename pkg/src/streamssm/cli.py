"""Command-line entry point.

Every command writes into ``<out>/<command>-<config hash>-s<seed>/`` a copy of
the resolved configuration, its CSV/JSON outputs and matching figures. Exit
codes: 0 success, 2 bad configuration or arguments, 3 numeric failure; on
failure a JSON error object is printed to stderr (and saved as
``error.json`` when the run directory exists).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config, schema
from .encoder import MICRO_CONFIG, Encoder
from .experiments import AblationSpec, band_ablation, persistence_ablation
from .flowlab import FlowLabError, closed_form_fixed_point, deep_linear_flow
from .metrics import UndefinedMetricError, summary as metric_summary
from .preprocess import design_butterworth, notch_60, preprocess_offline
from .runtime import (TRACE_SCHEMA, StreamSession, equivalence_report, flop_report, latency_bench,
                      onset_metrics, run_recording, state_bytes, summary_json, trace_csv,
                      trace_summary)
from .ssl import TrainingError, toy_train
from .synth import (Recording, RecordingFormatError, annotations_json, gen_recording,
                    patch_labels, read_recording, write_recording)

log = logging.getLogger("streamssm")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class UsageError(ValueError):
    pass


# -- helpers ----------------------------------------------------------------------

class Run:
    def __init__(self, args, cfg: RunConfig, name: str):
        self.cfg = cfg
        self.seed = args.seed
        self.hash = cfg.config_hash()
        self.dir = Path(args.out) / f"{name}-{self.hash}-s{self.seed}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.write("config.ini", cfg.to_text())

    def path(self, name: str) -> Path:
        return self.dir / name

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.write_text(text)
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        return self.write(name, summary_json({"config_hash": self.hash, "seed": self.seed, **payload}) + "\n")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return apply_overrides(cfg, pairs) if pairs else cfg


def _model(cfg: RunConfig, args) -> Encoder:
    if getattr(args, "checkpoint", None):
        enc = load_checkpoint(args.checkpoint)
        if enc.config.n_channels != cfg.model.n_channels:
            log.info("checkpoint config overrides [model]")
        return enc
    enc = Encoder.init(cfg.model, np.random.default_rng([args.seed, 1]))
    # untrained head: small weights around a low bias
    enc.params["head.W"] *= cfg.stream.head_weight_scale
    enc.params["head.b"][:] = cfg.stream.head_bias
    return enc


def _recording(cfg: RunConfig, args) -> Recording:
    if getattr(args, "input", None):
        return read_recording(args.input)
    return gen_recording(cfg.synth_spec(args.seed))


# -- commands ---------------------------------------------------------------------

def cmd_gen(args, cfg):
    run = Run(args, cfg, "gen")
    rec = gen_recording(cfg.synth_spec(args.seed))
    write_recording(run.path("recording.ssmrec"), rec)
    run.write("annotations.json", annotations_json(rec) + "\n")
    run.write_json("summary.json", {"n_channels": len(rec.channel_names), "fs": rec.fs,
                                    "duration_s": rec.duration_s, "n_events": len(rec.annotations)})
    return run


def cmd_preprocess(args, cfg):
    run = Run(args, cfg, "preprocess")
    rec = read_recording(args.input)
    p = cfg.preprocess
    X = preprocess_offline(rec.samples, rec.fs, p.fs, (p.bandpass_low_hz, p.bandpass_high_hz), p.notch)
    out = Recording(p.fs, rec.channel_names, X.astype(np.float32),
                    [a for a in rec.annotations if a.offset_s <= X.shape[1] / p.fs + 1e-9])
    write_recording(run.path("recording.ssmrec"), out)
    run.write_json("summary.json", {"fs_in": rec.fs, "fs_out": p.fs, "n_samples": int(X.shape[1])})
    return run


def cmd_stream(args, cfg):
    if args.mode:
        cfg = apply_overrides(cfg, {"stream.mode": args.mode})
    if args.reset_s is not None:
        cfg = apply_overrides(cfg, {"stream.reset_s": str(args.reset_s)})
    run = Run(args, cfg, "stream")
    rec = _recording(cfg, args)
    enc = _model(cfg, args)
    p, s = cfg.preprocess, cfg.stream
    filters = []
    if s.causal_filters:
        filters.append(design_butterworth("bandpass", (p.bandpass_low_hz, p.bandpass_high_hz), rec.fs))
        if p.notch:
            filters.append(notch_60(rec.fs))
    session = StreamSession(enc, s.mode, s.reset_s, rec.fs, filters, p.rqn_window, p.rqn_eps)
    trace = run_recording(session, rec)
    run.write("trace.csv", trace_csv(trace))
    summary = {"schema": TRACE_SCHEMA, "mode": s.mode, "reset_s": s.reset_s, **trace_summary(trace)}
    # timings are not replayable; log them instead of writing them
    log.info("mean step latency %.3g s", summary.pop("latency_mean_s"))
    if rec.annotations:
        summary["onset"] = onset_metrics(trace, rec.annotations, enc.config.patch_samples / rec.fs)
    run.write_json("summary.json", summary)
    plotting.plot_trace(trace, run.path("trace.png"), rec.annotations)
    return run


def cmd_bench(args, cfg):
    run = Run(args, cfg, f"bench-{args.what}")
    m = cfg.model
    if args.what == "equivalence":
        rep = equivalence_report(m, args.seeds, args.weight_seeds, args.patches, base_seed=args.seed)
        run.write_json("equivalence.json", rep)
    elif args.what == "flops":
        rep = flop_report(m, cfg.stream.update_rate_hz)
        run.write("flops.csv", _csv(["component", "flops"], rep.rows()))
        run.write_json("flops.json", rep.to_dict())
        plotting.plot_flops(rep, run.path("flops.png"))
    elif args.what == "state":
        run.write_json("state.json", {"f32": state_bytes(m, "f32", cfg.preprocess.rqn_window),
                                      "f64": state_bytes(m, "f64", cfg.preprocess.rqn_window)})
    elif args.what == "latency":
        enc = Encoder.init(m, np.random.default_rng([args.seed, 1]))
        per_patch = m.patch_samples / cfg.preprocess.fs
        ctx = [max(1, int(round(c / per_patch))) for c in args.contexts]
        stats = latency_bench(enc, ctx, args.timed, args.warmup, args.seed)
        rows = [(c, st.context_patches, st.mean_s, st.p50_s, st.p99_s) for c, st in zip(args.contexts, stats)]
        # latencies are measurements, so this CSV is not byte-replayable
        run.write("latency.csv", _csv(["context_s", "context_patches", "mean_s", "p50_s", "p99_s"], rows))
        run.write_json("latency.json", {"contexts": [dict(zip(["context_s", "context_patches", "mean_s",
                                                              "p50_s", "p99_s"], r)) for r in rows]})
        plotting.plot_latency(stats, run.path("latency.png"))
    return run


def cmd_ablate_band(args, cfg):
    run = Run(args, cfg, "ablate-band")
    spec = AblationSpec()
    results = [band_ablation(spec, args.seed + k) for k in range(args.seeds)]
    bands = list(results[0].ablated)
    rows = [(r.seed, r.baseline, *[r.ablated[b] for b in bands], r.largest_drop) for r in results]
    run.write("band_ablation.csv", _csv(["seed", "baseline", *bands, "largest_drop"], rows))
    mean_drop = {b: float(np.mean([r.drops[b] for r in results])) for b in bands}
    run.write_json("band_ablation.json", {"mean_drop": mean_drop,
                                          "largest_drop": max(mean_drop, key=mean_drop.get)})
    plotting.plot_band_drops(mean_drop, run.path("band_ablation.png"))
    return run


def cmd_ablate_persistence(args, cfg):
    run = Run(args, cfg, "ablate-persistence")
    spec = AblationSpec(reset_s=cfg.stream.reset_s)
    results = [persistence_ablation(spec, args.seed + k) for k in range(args.seeds)]
    rows = [(r.seed, r.auroc["persistent"], r.auroc["windowed"], r.delta) for r in results]
    run.write("persistence.csv", _csv(["seed", "persistent", "windowed", "delta"], rows))
    run.write_json("persistence.json", {"n_persistent_ge_windowed": sum(r.delta >= 0 for r in results),
                                        "n_seeds": len(results)})
    plotting.plot_ablation([r[:3] for r in rows], run.path("persistence.png"))
    return run


def cmd_train_toy(args, cfg):
    stage = {"stage1": 1, "stage2": 2}[args.stage]
    run = Run(args, cfg, f"train-{args.stage}")
    s = cfg.ssl
    res = toy_train(stage, MICRO_CONFIG, steps=s.steps, seed=args.seed, lr=s.lr,
                    n_windows=s.windows, n_tokens=s.tokens)
    run.write("loss.csv", _csv(["step", "loss"], enumerate(res.losses)))
    run.write_json("summary.json", {"stage": stage, "eval_initial": res.eval_initial,
                                    "eval_final": res.eval_final, "ratio": res.ratio})
    plotting.plot_loss_curve(res.losses, run.path("loss.png"), args.stage)
    return run


def cmd_flowlab(args, cfg):
    run = Run(args, cfg, "flowlab")
    f = cfg.flowlab
    results, rows, summary = {}, [], {}
    for obj in ("mae", "jepa"):
        r = deep_linear_flow(cfg.flowlab_spec(obj))
        results[obj] = r
        rows += [(obj, t, w) for t, w in zip(r.t, r.w)]
        summary[obj] = {"terminal": r.terminal, "closed_form": closed_form_fixed_point(f.depth, f.rho, obj),
                        "escape_time": r.escape_time}
    run.write("trajectories.csv", _csv(["objective", "t", "w"], rows))
    run.write_json("flowlab.json", summary)
    plotting.plot_flows(results, run.path("flows.png"))
    return run


def cmd_eval(args, cfg):
    run = Run(args, cfg, "eval")
    rec = read_recording(args.recording)
    with open(args.trace, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "probability" not in rows[0]:
        raise UsageError("trace must be a single-output trace CSV with a probability column")
    prob = np.array([float(r["probability"]) for r in rows])
    P = cfg.model.patch_samples
    y = patch_labels(rec, P)[: len(prob)]
    out = {"n_patches": int(len(prob)),
           "onset": onset_metrics(prob, rec.annotations, P / rec.fs)}
    try:
        out["metrics"] = metric_summary(prob[: len(y)], y)
    except UndefinedMetricError as e:
        out["metrics"] = {"undefined": str(e)}
    run.write_json("eval.json", out)
    return run


def cmd_schema(args, cfg):
    print(json.dumps(schema(), indent=2))
    return None


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
    common.add_argument("--out", default="runs", help="parent directory for run outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="streamssm", description="Streaming state-space EEG encoder toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate a synthetic recording")
    p = sub.add_parser("preprocess", parents=[common], help="offline bandpass, notch and resampling")
    p.add_argument("--input", required=True)
    p = sub.add_parser("stream", parents=[common], help="stream a recording through a session")
    p.add_argument("--input", help="recording file (default: generate from [synth])")
    p.add_argument("--checkpoint", help="encoder checkpoint (default: random init)")
    p.add_argument("--mode", choices=["persistent", "windowed"])
    p.add_argument("--reset-s", type=float, dest="reset_s")
    p = sub.add_parser("bench", parents=[common], help="equivalence, latency, FLOP or state accounting")
    p.add_argument("what", choices=["equivalence", "latency", "flops", "state"])
    p.add_argument("--seeds", type=int, default=30, help="input seeds (equivalence)")
    p.add_argument("--weight-seeds", type=int, default=3, dest="weight_seeds")
    p.add_argument("--patches", type=int, default=80)
    p.add_argument("--contexts", type=float, nargs="+", default=[5.0, 3600.0], help="seconds (latency)")
    p.add_argument("--timed", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p = sub.add_parser("ablate-band", parents=[common], help="spectral band-stop ablation")
    p.add_argument("--seeds", type=int, default=3)
    p = sub.add_parser("ablate-persistence", parents=[common], help="persistent vs windowed ablation")
    p.add_argument("--seeds", type=int, default=5)
    p = sub.add_parser("train-toy", parents=[common], help="numeric-gradient toy pretraining")
    p.add_argument("stage", choices=["stage1", "stage2"])
    sub.add_parser("flowlab", parents=[common], help="deep linear MAE/JEPA gradient flows")
    p = sub.add_parser("eval", parents=[common], help="metrics for a stream trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--recording", required=True)
    sub.add_parser("schema", parents=[common], help="print the config schema")
    return ap


COMMANDS = {
    "gen": cmd_gen, "preprocess": cmd_preprocess, "stream": cmd_stream, "bench": cmd_bench,
    "ablate-band": cmd_ablate_band, "ablate-persistence": cmd_ablate_persistence,
    "train-toy": cmd_train_toy, "flowlab": cmd_flowlab, "eval": cmd_eval, "schema": cmd_schema,
}

NUMERIC_ERRORS = (FloatingPointError, FlowLabError, TrainingError, np.linalg.LinAlgError)
CONFIG_ERRORS = (ConfigError, UsageError, CheckpointError, RecordingFormatError, OSError, ValueError)


def _fail(code: int, exc: Exception, out_dir: Path | None) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None and out_dir.is_dir():
        (out_dir / "error.json").write_text(text + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run_dir = None
    try:
        cfg = _resolve_config(args)
        run_dir = Path(args.out) / f"{args.command}-{cfg.config_hash()}-s{args.seed}"
        run = COMMANDS[args.command](args, cfg)
        if run is not None:
            print(run.dir)
        return 0
    except NUMERIC_ERRORS as e:
        return _fail(EXIT_NUMERIC, e, run_dir)
    except CONFIG_ERRORS as e:
        return _fail(EXIT_CONFIG, e, run_dir)


if __name__ == "__main__":
    sys.exit(main())
