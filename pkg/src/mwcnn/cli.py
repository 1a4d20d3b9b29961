"""``mwcnn`` command line: prepare, train, predict, verify.

Exit codes: 0 success, 1 internal error, 2 input error, 3 compatibility error.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from mwcnn import model as M
from mwcnn.eegio import EegFormatError, read_events_csv, read_recording
from mwcnn.metrics import (ConfusionCounts, export_history, export_report, fmt_rate, metrics,
                           read_window_csv)
from mwcnn.preprocess import (DatasetFormatError, InsufficientSpanError, build_dataset, load_dataset,
                              save_dataset)
from mwcnn.train import TrainConfig, TrainingDiverged, run_cross_subject, run_cv
from mwcnn.verify import run_checks

log = logging.getLogger("mwcnn")

EXPERIMENTS = ("cv", "cross_subject", "window_lengths")


class InputError(Exception):
    """Bad configuration or unreadable input (exit code 2)."""


@dataclass
class RunConfig:
    # training
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.2
    chunk_size: int = 16
    seed: int = 0
    # data and model
    recordings: list = field(default_factory=list)  # [{path, events, subject, session}]
    dataset: str = None
    datasets: dict = field(default_factory=dict)  # window_seconds -> dataset path
    weights: str = None
    window: str = None
    out: str = "mwcnn_out"
    window_seconds: float = 8
    experiment: str = "cv"
    folds: int = 10
    n_maps: int = 20
    pooling: list = None
    n_taps: int = 4097
    band: list = field(default_factory=lambda: [0.5, 50.0])
    zscore_mode: str = "channel"
    apply_filter: bool = True

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise InputError(f"{path}: unknown config keys {unknown}")
        cfg = cls(**raw)
        cfg._resolve(path.parent)
        return cfg

    def _resolve(self, base):
        def fix(p):
            return None if p is None else str((base / p) if not Path(p).is_absolute() else Path(p))

        for item in self.recordings:
            item["path"] = fix(item["path"])
            item["events"] = fix(item.get("events"))
        self.dataset, self.weights, self.window, self.out = map(
            fix, (self.dataset, self.weights, self.window, self.out))
        self.datasets = {str(k): fix(v) for k, v in self.datasets.items()}

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise InputError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.pooling is None and self.window_seconds not in M.POOLING:
            raise InputError(f"window_seconds must be 2, 5 or 8 (got {self.window_seconds}) "
                             "unless 'pooling' is given")
        try:
            self.train_config()
        except ValueError as exc:
            raise InputError(str(exc)) from None

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def arch(self, fs, n_channels, window_seconds=None):
        ws = self.window_seconds if window_seconds is None else window_seconds
        pooling = None if self.pooling is None else [tuple(p) for p in self.pooling]
        return M.build_arch(ws, fs, n_channels, self.n_maps, pooling, self.dropout_rate)


def _require(path, what):
    if path is None:
        raise InputError(f"config does not name a {what}")
    if not Path(path).exists():
        raise InputError(f"{what} not found: {path}")
    return path


def _load_dataset(path):
    try:
        return load_dataset(_require(path, "dataset file"))
    except DatasetFormatError as exc:
        raise InputError(f"{path}: {exc}") from None


def _print_counts(name, counts):
    m = metrics(counts)
    print(f"{name}: TP={counts.tp} TN={counts.tn} FP={counts.fp} FN={counts.fn} "
          f"accuracy={fmt_rate(m.accuracy)} sensitivity={fmt_rate(m.sensitivity)} "
          f"specificity={fmt_rate(m.specificity)} precision={fmt_rate(m.precision)} npv={fmt_rate(m.npv)}")


# -- commands ---------------------------------------------------------------------------


def cmd_prepare(cfg):
    if not cfg.recordings:
        raise InputError("config lists no recordings")
    items = []
    for entry in cfg.recordings:
        rec_path = _require(entry.get("path"), "recording")
        ev_path = _require(entry.get("events"), "events file")
        try:
            rec = read_recording(rec_path, entry.get("subject"), entry.get("session"))
            events = [e for e in read_events_csv(ev_path) if e.session_id == rec.session_id]
        except EegFormatError as exc:
            raise InputError(str(exc)) from None
        items.append((rec, events))
    try:
        ds = build_dataset(items, cfg.window_seconds, cfg.seed, cfg.n_taps, tuple(cfg.band),
                           cfg.zscore_mode, cfg.apply_filter)
    except (InsufficientSpanError, ValueError) as exc:
        raise InputError(f"window extraction failed: {exc}") from None
    out = Path(cfg.dataset or Path(cfg.out) / "dataset.mwds")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    counts = ds.class_counts()
    print(f"MW: {counts['MW']}, FS: {counts['FS']}")
    print(f"skipped presses: {ds.skipped}")
    print(f"wrote {out}")
    return 0


def _train_cv(cfg, ds, out, tag, arch):
    result = run_cv(ds, arch, cfg.train_config(), k=cfg.folds)
    wdir = out / "weights"
    wdir.mkdir(parents=True, exist_ok=True)
    for r, params in enumerate(result.params, start=1):
        M.save_params(params, wdir / f"{tag}rep{r:02d}.mwnw")
    return result


def cmd_train(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    if cfg.experiment == "cv":
        ds = _load_dataset(cfg.dataset)
        arch = cfg.arch(ds.sampling_rate, ds.n_channels, ds.window_seconds)
        result = _train_cv(cfg, ds, out, "", arch)
        rows += [(f"cv_rep{r:02d}", c) for r, c in enumerate(result.counts, start=1)]
        rows.append(("cv_pooled", result.pooled))
        export_history(result.histories, out / "history.csv")
    elif cfg.experiment == "window_lengths":
        if not cfg.datasets:
            raise InputError("window_lengths experiment needs 'datasets' (window_seconds -> path)")
        for ws in sorted(cfg.datasets, key=float):
            ds = _load_dataset(cfg.datasets[ws])
            seconds = float(ws)
            seconds = int(seconds) if seconds.is_integer() else seconds
            pooling = None if cfg.pooling is None else [tuple(p) for p in cfg.pooling]
            if pooling is None and seconds not in M.POOLING:
                raise InputError(f"no pooling preset for {seconds} s windows")
            arch = M.build_arch(seconds, ds.sampling_rate, ds.n_channels, cfg.n_maps, pooling,
                                cfg.dropout_rate)
            result = _train_cv(cfg, ds, out, f"w{ws}s_", arch)
            rows.append((f"window_{ws}s", result.pooled))
            export_history(result.histories, out / f"history_{ws}s.csv")
    else:
        ds = _load_dataset(cfg.dataset)
        arch = cfg.arch(ds.sampling_rate, ds.n_channels, ds.window_seconds)
        histories = []
        (out / "weights").mkdir(parents=True, exist_ok=True)
        for run in (1, 2, 3):
            try:
                counts, history, params = run_cross_subject(ds, arch, cfg.train_config(), run)
            except ValueError as exc:
                raise InputError(str(exc)) from None
            M.save_params(params, out / "weights" / f"cross_subject_run{run}.mwnw")
            rows.append((f"cross_subject_run{run}", counts))
            histories.append(history)
        export_history(histories, out / "history.csv")
    export_report(rows, out / "report.csv")
    for name, counts in rows:
        _print_counts(name, counts)
    print(f"wrote {out / 'report.csv'}")
    return 0


def _windows_for_predict(cfg):
    path = _require(cfg.window, "window source")
    if Path(path).suffix.lower() == ".csv":
        try:
            window, _ = read_window_csv(path)
        except (ValueError, OSError) as exc:
            raise InputError(str(exc)) from None
        fs = window.shape[1] / cfg.window_seconds
        return [window], fs, window.shape[0]
    ds = _load_dataset(path)
    return [s.data for s in ds.samples], ds.sampling_rate, ds.n_channels


def cmd_predict(cfg):
    windows, fs, n_channels = _windows_for_predict(cfg)
    arch = cfg.arch(fs, n_channels)
    params = M.load_params(_require(cfg.weights, "weights file"), arch)
    for i, window in enumerate(windows):
        label, probs = M.predict(params, window)
        print(f"window {i}: {M.LABEL_NAMES[label]} p={probs[label]:.5f} "
              f"p_fs={probs[M.FS]:.5f} p_mw={probs[M.MW]:.5f}")
    return 0


def cmd_verify(floor_pooling=False, conv_grad_perturb=0.0):
    checks = run_checks(floor_pooling, conv_grad_perturb)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name}: {c.detail}")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return 1
    print(f"all {len(checks)} checks passed")
    return 0


# -- entry point -------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mwcnn", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["prepare", "train", "predict", "verify"])
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--window-seconds", type=float, choices=[2, 5, 8])
    parser.add_argument("--experiment", choices=EXPERIMENTS)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--weights", help="weights file (predict)")
    parser.add_argument("--window", help="dataset (.mwds) or window CSV to classify (predict)")
    parser.add_argument("-v", "--verbose", action="store_true")
    # fault injection for the self-check
    parser.add_argument("--inject-floor-pooling", action="store_true", help=argparse.SUPPRESS)
    parser.add_argument("--inject-grad-fault", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.seed = args.seed
    if args.window_seconds is not None:
        ws = args.window_seconds
        cfg.window_seconds = int(ws) if float(ws).is_integer() else ws
    if args.experiment is not None:
        cfg.experiment = args.experiment
    if args.out is not None:
        cfg.out = args.out
    if args.weights is not None:
        cfg.weights = args.weights
    if args.window is not None:
        cfg.window = args.window


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify(args.inject_floor_pooling, args.inject_grad_fault)
        if not args.config:
            raise InputError(f"'{args.command}' needs --config")
        cfg = RunConfig.load(args.config)
        _apply_overrides(cfg, args)
        cfg.validate()
        return {"prepare": cmd_prepare, "train": cmd_train, "predict": cmd_predict}[args.command](cfg)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except M.FingerprintError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (M.WeightsFormatError, M.ArchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
