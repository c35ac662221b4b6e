"""Command line front end.

Subcommands: synth (build a labeled synthetic dataset), train, stream
(chunk-by-chunk inference), infer (whole-sequence inference, with a
--batch flag so the two paths can be diffed), eval (render the mAP
table), gradcheck (finite-difference audit of the training gradients).

Every flag has a config-file equivalent: pass --config (or --spec for
synth) pointing at a JSON object whose keys are the flag names with
underscores. Precedence is flag > file > built-in default, unknown keys
are rejected, and the effective configuration is logged before any work
starts. Exit codes: 0 success, 1 validation failure, 2 I/O or file
format error. TRN_LOG_LEVEL controls verbosity (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import dataio as dio
from . import evaluate as ev
from . import model as md
from . import numeric as nm
from . import training as tr
from .model import ChunkStreams, FusionVariant, TrnConfig, TrnParams
from .numeric import ValidationError
from .streaming import OnlineDetector

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2

STREAM_NAMES = ("appearance", "motion", "pose")


def _variant(value: str) -> str:
    try:
        FusionVariant(value)
    except ValueError:
        raise ValidationError(
            f"unknown fusion variant {value!r}, expected one of "
            f"{[v.value for v in FusionVariant]}"
        ) from None
    return value


def _features_value(value) -> dict[str, str]:
    """Accept ["name=path", ...] or {"name": "path"} and normalize."""
    if isinstance(value, dict):
        pairs = dict(value)
    else:
        pairs = {}
        for item in value:
            name, sep, path = str(item).partition("=")
            if not sep or not name or not path:
                raise ValidationError(f"--features takes NAME=PATH pairs, got {item!r}")
            pairs[name] = path
    for name in pairs:
        if name not in STREAM_NAMES:
            raise ValidationError(
                f"unknown stream {name!r}, expected one of {list(STREAM_NAMES)}"
            )
    return pairs


class Opt:
    """One merged option: flag, config-file key, type, default."""

    def __init__(self, typ, default, help_text, kind="value"):
        self.typ = typ
        self.default = default
        self.help = help_text
        self.kind = kind  # "value" | "flag" | "features"

    def coerce(self, value):
        if value is None:
            return None
        if self.kind == "flag":
            return bool(value)
        if self.kind == "features":
            return _features_value(value)
        return self.typ(value)


def _train_options():
    return {
        "manifest": Opt(str, None, "dataset manifest JSON"),
        "out": Opt(str, None, "checkpoint file to write"),
        "metrics_out": Opt(str, None, "optional JSON file for per-epoch metrics"),
        "variant": Opt(_variant, "two_stream", "fusion variant"),
        "one_stream": Opt(str, "appearance", "stream consumed by the one_stream variant"),
        "hidden_size": Opt(int, 512, "recurrent state width"),
        "learning_rate": Opt(float, 5e-4, "Adam learning rate"),
        "weight_decay": Opt(float, 5e-4, "decoupled weight decay"),
        "batch_size": Opt(int, 2, "windows per optimizer step"),
        "seq_len": Opt(int, 64, "training window length in chunks"),
        "decoder_steps": Opt(int, 8, "anticipation rollout length"),
        "epochs": Opt(int, 10, "training epochs"),
        "seed": Opt(int, 0, "rng seed for init and shuffling"),
        "lambda_enc": Opt(float, 1.0, "weight of the present-chunk loss head"),
        "lambda_dec": Opt(float, 1.0, "weight of the anticipation loss head"),
        "eval_every": Opt(int, 1, "held-out mAP cadence in epochs, 0 disables"),
    }


def _synth_options():
    spec = dio.SyntheticSpec()
    out = {"out": Opt(str, None, "output dataset directory")}
    helps = {
        "num_classes": "action classes (background is added on top)",
        "appearance_dim": "appearance feature width",
        "motion_dim": "motion feature width",
        "sigma_ratio": "noise sigma relative to class mean separation",
        "mean_segment_len": "mean action segment length in chunks",
        "background_prior": "fraction of time spent in background",
        "num_videos": "videos to generate",
        "video_len": "chunks per video",
        "train_fraction": "fraction of videos in the train split",
        "chunk_size": "frames per chunk",
        "fps": "frames per second",
        "seed": "rng seed",
    }
    for name, text in helps.items():
        default = getattr(spec, name)
        out[name] = Opt(type(default), default, text)
    return out


def _io_options(batch_flag: bool):
    out = {
        "ckpt": Opt(str, None, "checkpoint file"),
        "out": Opt(str, None, "prediction dump to write (JSON lines)"),
        "features": Opt(None, None, "per-stream feature files as NAME=PATH", kind="features"),
        "video_id": Opt(str, "video", "video id recorded with --features input"),
        "manifest": Opt(str, None, "dataset manifest (alternative to --features)"),
        "split": Opt(str, "test", "manifest split to process"),
        "video": Opt(str, None, "restrict manifest input to one video id"),
    }
    if batch_flag:
        out["batch"] = Opt(bool, False, "run the whole-sequence path instead of chunkwise pushes", kind="flag")
    return out


def _eval_options():
    return {
        "dump": Opt(str, None, "prediction dump (JSON lines)"),
        "gt": Opt(str, None, "ground-truth annotation TSV"),
        "classmap": Opt(str, None, "class map TSV"),
        "expand_to_frames": Opt(bool, False, "rank frames instead of chunks", kind="flag"),
    }


def _gradcheck_options():
    return {
        "variant": Opt(_variant, "two_stream", "fusion variant"),
        "one_stream": Opt(str, "appearance", "stream consumed by the one_stream variant"),
        "hidden_size": Opt(int, 4, "recurrent state width"),
        "seq_len": Opt(int, 3, "window length in chunks"),
        "decoder_steps": Opt(int, 2, "anticipation rollout length"),
        "num_actions": Opt(int, 2, "action classes (background added on top)"),
        "appearance_dim": Opt(int, 3, "appearance feature width"),
        "motion_dim": Opt(int, 2, "motion feature width"),
        "pose_dim": Opt(int, 5, "pose feature width"),
        "seed": Opt(int, 0, "rng seed"),
        "tolerance": Opt(float, 1e-4, "max allowed relative gradient error"),
    }


class CliParser(argparse.ArgumentParser):
    # bad flags and values are validation failures, not I/O errors
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _add_options(parser: argparse.ArgumentParser, options: dict[str, Opt]) -> None:
    for key, opt in options.items():
        flag = "--" + key.replace("_", "-")
        if opt.kind == "flag":
            parser.add_argument(
                flag, dest=key, action="store_true", default=None,
                help=f"{opt.help} (default: {opt.default})",
            )
        elif opt.kind == "features":
            parser.add_argument(
                flag, dest=key, nargs="+", metavar="NAME=PATH", default=None,
                help=f"{opt.help} (default: {opt.default})",
            )
        else:
            parser.add_argument(
                flag, dest=key, default=None, metavar=key.upper(),
                help=f"{opt.help} (default: {opt.default})",
            )


def _load_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: malformed config JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return doc


def _effective_config(args, options: dict[str, Opt], file_flag: str = "config") -> dict:
    """Merge defaults, config file, and explicit flags; echo the result."""
    cfg = {k: opt.default for k, opt in options.items()}
    path = getattr(args, file_flag, None)
    if path:
        doc = _load_config_file(path)
        unknown = sorted(set(doc) - set(options))
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {unknown}")
        for k, v in doc.items():
            cfg[k] = options[k].coerce(v)
    for k, opt in options.items():
        v = getattr(args, k)
        if v is not None:
            cfg[k] = opt.coerce(v)
    for k in sorted(cfg):
        log.info("config %s = %r", k, cfg[k])
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ValidationError(
            "missing required " + ", ".join("--" + k.replace("_", "-") for k in missing)
        )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _effective_config(args, _synth_options(), file_flag="spec")
    _require(cfg, "out")
    out_dir = cfg.pop("out")
    spec = dio.SyntheticSpec(**cfg)
    manifest_path = dio.generate_synthetic(spec, out_dir)
    log.info("wrote dataset under %s", out_dir)
    print(manifest_path)
    return EXIT_OK


def _model_config_from_manifest(
    manifest: dio.Manifest, cmap: dio.ClassMap, cfg: dict
) -> TrnConfig:
    if not manifest.videos:
        raise ValidationError("manifest lists no videos")
    first = manifest.videos[0]
    available = {name: ref.dim for name, ref in first.streams.items()}
    variant = FusionVariant(cfg["variant"])
    if variant is FusionVariant.ONE_STREAM:
        wanted = (cfg["one_stream"],)
    elif variant is FusionVariant.TWO_STREAM:
        wanted = ("appearance", "motion")
    else:
        wanted = ("appearance", "pose", "motion")
    missing = sorted(set(wanted) - set(available))
    if missing:
        raise ValidationError(
            f"{variant.value} needs streams {list(wanted)}, manifest lacks {missing}"
        )
    dims = {f"{n}_dim": (available[n] if n in wanted else None) for n in STREAM_NAMES}
    return TrnConfig(
        fusion_variant=variant,
        hidden_size=cfg["hidden_size"],
        decoder_steps=cfg["decoder_steps"],
        num_actions=cmap.num_actions,
        seq_len=cfg["seq_len"],
        chunk_size=first.chunk_size,
        fps=int(first.fps),
        **dims,
    )


def cmd_train(args) -> int:
    cfg = _effective_config(args, _train_options())
    _require(cfg, "manifest", "out")
    manifest = dio.load_manifest(cfg["manifest"])
    cmap = dio.read_class_map(manifest.resolve(manifest.class_map))
    model_config = _model_config_from_manifest(manifest, cmap, cfg)
    train_config = tr.TrainConfig(
        learning_rate=cfg["learning_rate"],
        weight_decay=cfg["weight_decay"],
        batch_size=cfg["batch_size"],
        seq_len=cfg["seq_len"],
        decoder_steps=cfg["decoder_steps"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        lambda_enc=cfg["lambda_enc"],
        lambda_dec=cfg["lambda_dec"],
        eval_every=cfg["eval_every"],
    )
    params, metrics = tr.train(manifest, model_config, train_config)
    last = metrics[-1] if metrics else None
    meta = {
        "epochs": len(metrics),
        "final_loss": None if last is None else last.mean_loss,
        "heldout_map": None if last is None else last.heldout_map,
    }
    tr.save_checkpoint(cfg["out"], params, meta=meta)
    log.info("wrote checkpoint %s", cfg["out"])
    if cfg["metrics_out"]:
        rows = [
            {"epoch": m.epoch, "mean_loss": m.mean_loss, "heldout_map": m.heldout_map}
            for m in metrics
        ]
        with open(cfg["metrics_out"], "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=2, sort_keys=True)
            f.write("\n")
    if last is not None:
        print(f"final loss {last.mean_loss:.6f}")
        if last.heldout_map is not None:
            print(f"held-out mAP {last.heldout_map:.4f}")
    return EXIT_OK


def _load_feature_inputs(cfg: dict, config: TrnConfig):
    """Resolve input flags into (video_id, streams dict, chunk_size, fps)."""
    if cfg.get("features") and cfg.get("manifest"):
        raise ValidationError("pass either --features or --manifest, not both")
    inputs = []
    if cfg.get("features"):
        streams = {}
        lengths = {}
        for name, path in cfg["features"].items():
            arr = dio.read_features(path)
            streams[name] = arr
            lengths[name] = arr.shape[0]
        if len(set(lengths.values())) > 1:
            raise ValidationError(f"feature files disagree on chunk count: {lengths}")
        inputs.append((cfg["video_id"], streams, config.chunk_size, float(config.fps)))
    elif cfg.get("manifest"):
        manifest = dio.load_manifest(cfg["manifest"])
        videos = manifest.split(cfg["split"])
        if cfg.get("video"):
            videos = [v for v in videos if v.video_id == cfg["video"]]
            if not videos:
                raise ValidationError(
                    f"video {cfg['video']!r} is not in split {cfg['split']!r}"
                )
        for video in videos:
            streams = dio.load_video_streams(manifest, video)
            inputs.append((video.video_id, streams, video.chunk_size, video.fps))
    else:
        raise ValidationError("missing input: pass --features NAME=PATH ... or --manifest")
    if not inputs:
        raise ValidationError(f"no videos in split {cfg.get('split')!r}")
    return [
        (vid, tr._streams_for_variant(streams, config), chunk, fps)
        for vid, streams, chunk, fps in inputs
    ]


def _run_inference(params: TrnParams, inputs, batch: bool) -> ev.PredictionDump:
    cfg = params.config
    first = inputs[0]
    dump = ev.PredictionDump(
        chunk_size=first[2], fps=first[3], decoder_steps=cfg.decoder_steps, classes=cfg.classes
    )
    for video_id, streams, _, _ in inputs:
        t_len = next(iter(streams.values())).shape[0]
        sequence = [
            ChunkStreams(
                appearance=streams["appearance"][t] if "appearance" in streams else None,
                motion=streams["motion"][t] if "motion" in streams else None,
                pose=streams["pose"][t] if "pose" in streams else None,
            )
            for t in range(t_len)
        ]
        if batch:
            outputs, _ = md.trn_forward(params, sequence)
        else:
            det = OnlineDetector(params)
            outputs = [det.push_chunk(chunk) for chunk in sequence]
        dump.videos[video_id] = ev.VideoPredictions(
            present=np.stack([o.present for o in outputs], axis=0),
            anticipated=np.stack(
                [np.stack(o.anticipated, axis=0) for o in outputs], axis=0
            ),
        )
    return dump


def _cmd_inference(args, batch_flag: bool) -> int:
    cfg = _effective_config(args, _io_options(batch_flag))
    _require(cfg, "ckpt", "out")
    params, _, _ = tr.load_checkpoint(cfg["ckpt"])
    inputs = _load_feature_inputs(cfg, params.config)
    dump = _run_inference(params, inputs, batch=bool(cfg.get("batch")))
    ev.write_prediction_dump(cfg["out"], dump)
    chunks = sum(streams[next(iter(streams))].shape[0] for _, streams, _, _ in inputs)
    log.info(
        "wrote %d videos (%d chunks) to %s", len(inputs), chunks, cfg["out"]
    )
    print(cfg["out"])
    return EXIT_OK


def cmd_stream(args) -> int:
    return _cmd_inference(args, batch_flag=False)


def cmd_infer(args) -> int:
    return _cmd_inference(args, batch_flag=True)


def cmd_eval(args) -> int:
    cfg = _effective_config(args, _eval_options())
    _require(cfg, "dump", "gt", "classmap")
    dump = ev.read_prediction_dump(cfg["dump"])
    gt = ev.ground_truth_from_files(cfg["gt"], cfg["classmap"])
    expand = bool(cfg["expand_to_frames"])
    encoder = ev.per_frame_map(dump, gt, expand_to_frames=expand)
    steps = [
        ev.anticipation_map(dump, gt, step=i, expand_to_frames=expand)
        for i in range(1, dump.decoder_steps + 1)
    ]
    for name, res in [("encoder", encoder)] + [
        (f"step {i + 1}", r) for i, r in enumerate(steps)
    ]:
        for cls, ap in sorted(res.per_class.items()):
            log.debug("%s AP[%s] = %.6f", name, cls, ap)
        for cls in res.skipped:
            log.info("%s: class %s has no positives, skipped", name, cls)
    table = ev.render_report(
        encoder.mean_ap,
        [r.mean_ap for r in steps],
        chunk_size=dump.chunk_size,
        fps=dump.fps,
    )
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _effective_config(args, _gradcheck_options())
    variant = FusionVariant(cfg["variant"])
    dims = {f"{n}_dim": cfg[f"{n}_dim"] for n in STREAM_NAMES}
    if variant is FusionVariant.ONE_STREAM:
        dims = {
            f"{n}_dim": (cfg[f"{n}_dim"] if n == cfg["one_stream"] else None)
            for n in STREAM_NAMES
        }
    elif variant is FusionVariant.TWO_STREAM:
        dims["pose_dim"] = None
    model_config = TrnConfig(
        fusion_variant=variant,
        hidden_size=cfg["hidden_size"],
        decoder_steps=cfg["decoder_steps"],
        num_actions=cfg["num_actions"],
        seq_len=cfg["seq_len"],
        **dims,
    )
    train_config = tr.TrainConfig(
        seq_len=cfg["seq_len"], decoder_steps=cfg["decoder_steps"], epochs=0, eval_every=0
    )
    rng = np.random.default_rng(cfg["seed"])
    params = TrnParams.init(model_config, rng)
    # audit at a generic position: the zero biases of a fresh init can park
    # a relu pre-activation exactly on its kink (dead fused vector feeding a
    # zero bias), where one-sided analytic gradients and central differences
    # legitimately disagree
    for t in params.named().values():
        t.data = rng.uniform(-0.5, 0.5, size=t.data.shape)
    sequence = [
        ChunkStreams(
            **{
                n: (rng.normal(size=d) if d is not None else None)
                for n, d in ((n, getattr(model_config, f"{n}_dim")) for n in STREAM_NAMES)
            }
        )
        for _ in range(cfg["seq_len"])
    ]
    labels = rng.integers(0, model_config.classes, size=cfg["seq_len"])
    corrupt = float(os.environ.get("TRN_GRADCHECK_CORRUPT", "0") or "0")
    err = nm.grad_check(
        lambda: tr.sequence_loss(params, train_config, sequence, labels),
        list(params.named().values()),
        _corrupt_analytic=corrupt,
    )
    ok = err < cfg["tolerance"]
    print(f"max relative error {err:.3e} (tolerance {cfg['tolerance']:.1e})")
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="trn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, options, help_text, file_flag="config"):
        # add_parser builds subparsers with the parent's class, so these
        # inherit the exit-code-1 error handler
        p = sub.add_parser(name, help=help_text)
        p.add_argument(
            "--" + file_flag,
            dest=file_flag,
            metavar="FILE",
            default=None,
            help="JSON file with flag defaults (flags win; unknown keys rejected)",
        )
        _add_options(p, options)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, _synth_options(), "generate a synthetic dataset", file_flag="spec")
    add("train", cmd_train, _train_options(), "train a model on a manifest")
    add("stream", cmd_stream, _io_options(False), "chunk-by-chunk streaming inference")
    add("infer", cmd_infer, _io_options(True), "whole-sequence inference")
    add("eval", cmd_eval, _eval_options(), "render the mAP report for a dump")
    add("gradcheck", cmd_gradcheck, _gradcheck_options(), "finite-difference gradient audit")
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("TRN_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    logging.getLogger("trn").setLevel(level)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except dio.FormatError as e:
        log.error("%s", e)
        return EXIT_IO
    except ValidationError as e:
        log.error("%s", e)
        return EXIT_VALIDATION
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO
    except ValueError as e:
        log.error("%s", e)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
