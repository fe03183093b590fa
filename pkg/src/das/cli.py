"""Command-line entry point wiring the pipeline together.

Subcommands: synth, fit, spectra, label, train, infer, daily, bench.
Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.  Every run
logs its seed and a hash of its effective configuration so outputs can be
reproduced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems with exit code 2; we reserve 2 for
    runtime errors, so remap usage errors to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]


def _log(json_mode: bool, event: str, **fields):
    if json_mode:
        print(json.dumps({"event": event, **fields}, sort_keys=True), file=sys.stderr)
    else:
        body = " ".join(f"{k}={v}" for k, v in fields.items())
        print(f"das {event}: {body}", file=sys.stderr)


def _dasf_inputs(spec: str) -> list:
    """Expand an --in argument: a file, a directory of .dasf, or a list file."""
    p = Path(spec)
    if p.is_dir():
        files = sorted(p.glob("*.dasf"))
        if not files:
            raise FileNotFoundError(f"no .dasf files under {p}")
        return files
    if p.suffix == ".txt":
        return [Path(line.strip()) for line in p.read_text().splitlines() if line.strip()]
    return [p]


def _cmd_synth(args, json_mode):
    from .store import write_segment
    from .synth import SceneConfig, gen_scene

    config = SceneConfig.from_json(args.config)
    doc = config.to_dict()
    _log(json_mode, "synth", seed=config.seed, config_sha=_config_hash(doc))
    segment, mask = gen_scene(config, args.tile, args.stride or args.tile)
    write_segment(segment, args.out)
    truth_path = args.truth or (str(args.out) + ".truth.json")
    Path(truth_path).write_text(json.dumps(mask.to_dict(), sort_keys=True) + "\n")
    _log(json_mode, "synth.done", out=str(args.out), truth=truth_path,
         **mask.counts())
    return 0


def _cmd_fit(args, json_mode):
    from .metrics import fit_gaussians, histogram
    from .store import read_segment

    segment = read_segment(args.input)
    _log(json_mode, "fit", bins=args.bins,
         config_sha=_config_hash({"in": str(args.input), "bins": args.bins}))
    hist = histogram(segment.data, args.bins)
    report = {}
    for label, n in (("single", 1), ("double", 2)):
        fit = fit_gaussians(hist, n)
        report[label] = {
            "components": [vars(c) for c in fit.components],
            "chi2_red": fit.chi2_red,
            "df": fit.df,
            "converged": fit.converged,
        }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_spectra(args, json_mode):
    from .metrics import average_spectral_amplitude, channel_spectra
    from .store import read_segment

    segment = read_segment(args.input)
    summary = average_spectral_amplitude(
        channel_spectra(segment.data, segment.sample_rate_hz))
    lines = ["freq_hz,avg_amplitude"]
    for f, a in zip(summary.freqs, summary.avg_amplitude):
        lines.append(f"{f:.6f},{a:.8g}")
    out = args.out or "spectra.csv"
    Path(out).write_text("\n".join(lines) + "\n")
    _log(json_mode, "spectra.done", out=out, bins=len(summary.freqs))
    return 0


def _cmd_label(args, json_mode):
    from .label import LabelCriteria, build_training_set
    from .store import read_segment

    criteria = LabelCriteria.from_json(args.criteria) if args.criteria else LabelCriteria()
    files = _dasf_inputs(args.input)
    segments = [read_segment(f) for f in files]
    doc = {"criteria": criteria.to_dict(), "tile": args.tile,
           "per_label": args.per_label, "seed": args.seed}
    _log(json_mode, "label", seed=args.seed, config_sha=_config_hash(doc),
         n_inputs=len(files))
    manifest = build_training_set(
        segments, criteria, args.tile, args.out, args.per_label,
        seed=args.seed, source_ids=[str(f) for f in files],
    )
    _log(json_mode, "label.done", out=str(args.out), **manifest.counts)
    return 0


def _cmd_train(args, json_mode):
    from .net import ModelConfig
    from .store import CorpusManifest
    from .train import Hyperparams, train

    config = ModelConfig.from_dict(json.loads(Path(args.config).read_text())) \
        if args.config else ModelConfig()
    hyper = Hyperparams.from_json(args.hyper) if args.hyper else Hyperparams()
    doc = {"model": config.to_dict(), "hyper": vars(hyper), "workers": args.workers}
    _log(json_mode, "train", seed=hyper.seed, config_sha=_config_hash(doc),
         workers=args.workers)
    manifest = CorpusManifest.load(args.corpus)
    report = train(manifest, config, hyper, world_size=args.workers, out_dir=args.out)
    _log(json_mode, "train.done",
         final_val_acc=f"{report.val_acc[-1]:.4f}",
         final_train_loss=f"{report.train_loss[-1]:.5f}",
         samples_per_s=f"{report.samples_per_s:.1f}",
         checkpoint=report.checkpoint_path)
    if not args.out:
        print(json.dumps(report.to_dict(), indent=1))
    return 0


def _cmd_infer(args, json_mode):
    from .infer import infer_segment, scan_corpus, scan_rows_to_csv
    from .net import load_checkpoint
    from .store import read_segment

    files = _dasf_inputs(args.input)
    doc = {"model": str(args.model), "tile": args.tile, "stride": args.stride,
           "workers": args.workers}
    _log(json_mode, "infer", config_sha=_config_hash(doc), n_files=len(files),
         workers=args.workers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = scan_corpus(args.model, files, n_workers=args.workers,
                       tile_size=args.tile, stride=args.stride)
    scan_rows_to_csv(rows, out_dir / "scan.csv")
    if args.maps or args.heatmap:
        model = load_checkpoint(args.model)
        tile = args.tile or model.config.input_size
        stride = args.stride or tile
        for f in files:
            try:
                pmap = infer_segment(model, read_segment(f), tile, stride)
            except Exception as exc:
                _log(json_mode, "infer.map_error", file=str(f), error=str(exc))
                continue
            stem = Path(f).stem
            if args.maps:
                pmap.save_csv(out_dir / f"{stem}.map.csv")
            if args.heatmap:
                pmap.save_heatmap_pgm(out_dir / f"{stem}.heatmap.pgm")
    n_errors = sum(1 for r in rows if r.error)
    _log(json_mode, "infer.done", out=str(out_dir / "scan.csv"), n_errors=n_errors)
    return 0


def _cmd_daily(args, json_mode):
    from .infer import daily_curve

    lines = Path(args.input).read_text().splitlines()
    header = lines[0].split(",")
    col = header.index("mean_p")
    values = []
    for line in lines[1:]:
        cell = line.split(",")[col]
        if cell:
            values.append(float(cell))
    curve = daily_curve(np.array(values), factor=args.factor, kernel_sigma=args.sigma)
    out = args.out or "daily.csv"
    curve.save_csv(out)
    _log(json_mode, "daily.done", out=out, n_raw=len(curve.raw),
         n_smoothed=len(curve.smoothed))
    return 0


def _cmd_bench(args, json_mode):
    from .net import ModelConfig
    from .train import throughput_benchmark

    config = ModelConfig.from_dict(json.loads(Path(args.config).read_text())) \
        if args.config else ModelConfig(input_size=50)
    worlds = [int(w) for w in args.workers.split(",")]
    _log(json_mode, "bench", config_sha=_config_hash(config.to_dict()), workers=args.workers)
    results = throughput_benchmark(config, worlds, n_steps=args.steps,
                                   batch_size=args.batch)
    text = json.dumps(results, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="das", description=__doc__)
    parser.add_argument("--json", action="store_true", help="machine-readable logs")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parents=[], help="render a synthetic scene to DASF")
    p.add_argument("--config", required=True, help="SceneConfig JSON")
    p.add_argument("--out", required=True, help="output .dasf path")
    p.add_argument("--truth", help="ground-truth JSON path (default: <out>.truth.json)")
    p.add_argument("--tile", type=int, default=200)
    p.add_argument("--stride", type=int, default=None)

    p = sub.add_parser("fit", help="histogram + single/double Gaussian fits")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bins", type=int, default=201)
    p.add_argument("--out", help="write JSON report here instead of stdout")

    p = sub.add_parser("spectra", help="cross-channel average spectral amplitude CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")

    p = sub.add_parser("label", help="build a balanced labeled corpus")
    p.add_argument("--in", dest="input", required=True,
                   help=".dasf file, directory, or list file")
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--per-label", dest="per_label", type=int, required=True)
    p.add_argument("--criteria", help="LabelCriteria JSON")
    p.add_argument("--tile", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the classifier on a corpus")
    p.add_argument("--corpus", required=True, help="corpus manifest.json")
    p.add_argument("--config", help="ModelConfig JSON")
    p.add_argument("--hyper", help="Hyperparams JSON")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="output directory for checkpoint and curves")

    p = sub.add_parser("infer", help="scan files into probability outputs")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", dest="out_dir", default="infer_out")
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--maps", action="store_true", help="write per-file map CSVs")
    p.add_argument("--heatmap", action="store_true", help="write per-file PGM heatmaps")

    p = sub.add_parser("daily", help="downsample + smooth per-file probabilities")
    p.add_argument("--in", dest="input", required=True, help="scan.csv from `das infer`")
    p.add_argument("--factor", type=int, default=10)
    p.add_argument("--sigma", type=float, default=6.0)
    p.add_argument("--out")

    p = sub.add_parser("bench", help="training throughput across world sizes")
    p.add_argument("--config", help="ModelConfig JSON")
    p.add_argument("--workers", default="1,2,4")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--out")

    return parser


_COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "spectra": _cmd_spectra,
    "label": _cmd_label,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "daily": _cmd_daily,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args, args.json)
    except BrokenPipeError:
        return 2
    except Exception as exc:
        print(f"das {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
