"""Command-line pipeline: synth -> preprocess -> train -> encode /
reconstruct / evaluate / probe.

Every command is a deterministic function of (config, seed): outputs
carry the resolved-config digest, checkpoints round-trip bit-exactly,
and re-running a command with the same digest rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import latent_models as lm
from . import metrics as mx
from . import preprocess as pp
from . import signal_io as sio
from .errors import CliError, EcgLatentError, ParameterError

CHECKPOINT_MAGIC = b"ECKP"
CHECKPOINT_VERSION = 1


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    # synth
    corpus_records: int = 200
    corpus_duration_s: float = 4.0
    corpus_noise_std_uv: float = 10.0
    corpus_sample_rate_hz: float = 1000.0
    # paths (empty string -> derived from out_dir)
    dataset_path: str = ""
    beats_path: str = ""
    scaling_path: str = ""
    kors_matrix_path: str = ""
    checkpoint_path: str = ""
    checkpoints: str = ""  # comma-separated list for evaluate
    # model
    variant: str = "SAE"
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    scale: float = 1.0 / 16.0
    latent_dim: int = 30
    # splits / export
    test_fraction: float = 0.1
    train_fraction: float = 1.0
    plot_count: int = 4

    def resolve(self):
        out = self.out_dir
        self.dataset_path = self.dataset_path or os.path.join(out, "dataset.ecgl")
        self.beats_path = self.beats_path or os.path.join(out, "beats.ecgl")
        self.scaling_path = self.scaling_path or os.path.join(out, "scaling.json")
        self.checkpoint_path = self.checkpoint_path or os.path.join(
            out, f"{self.variant}.ckpt"
        )
        if not 0.0 < self.test_fraction < 1.0:
            raise CliError("test_fraction must be in (0, 1)")
        if not 0.0 < self.train_fraction <= 1.0:
            raise CliError("train_fraction must be in (0, 1]")

    def digest(self) -> str:
        blob = json.dumps(
            {f.name: getattr(self, f.name) for f in fields(self)}, sort_keys=True
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_config_file(path: str) -> dict:
    """Flat TOML-like key = value file; strings may be quoted."""
    values: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if raw.startswith(('"', "'")) and raw.endswith(raw[0]) and len(raw) >= 2:
                values[key] = raw[1:-1]
            elif raw.lower() in ("true", "false"):
                values[key] = raw.lower() == "true"
            else:
                try:
                    values[key] = int(raw)
                except ValueError:
                    try:
                        values[key] = float(raw)
                    except ValueError:
                        values[key] = raw
    return values


def build_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        file_values = parse_config_file(args.config)
        known = {f.name for f in fields(RunConfig)}
        problems = [k for k in file_values if k not in known]
        if problems:
            raise CliError(f"unknown config keys: {', '.join(sorted(problems))}")
        for k, v in file_values.items():
            setattr(cfg, k, v)
    # flags win over file values
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "variant", None):
        cfg.variant = args.variant
        cfg.checkpoint_path = ""  # re-derive from the variant name
    if getattr(args, "train_fraction", None) is not None:
        cfg.train_fraction = args.train_fraction
    if getattr(args, "kors_matrix", None):
        cfg.kors_matrix_path = args.kors_matrix
    if args.out:
        cfg.out_dir = args.out
    cfg.resolve()
    return cfg


# ---------------------------------------------------------------------------
# small file helpers


def _atomic_write_text(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(text)
    os.replace(tmp, path)


def _atomic_write_bytes(path: str, blob: bytes):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def _write_meta(path: str, digest: str):
    _atomic_write_text(path + ".meta.json", json.dumps({"config_digest": digest}) + "\n")


def _require(path: str, producer: str):
    if not os.path.exists(path):
        raise CliError(f"missing {path}; run '{producer}' first")


def _csv_text(header: list[str], rows: list[list], digest: str) -> str:
    import io

    buf = io.StringIO()
    buf.write(f"# config_digest={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v: float) -> str:
    return f"{v:.9g}"


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, config, scaling, config_digest, log_digest=""):
    payload = lm.model_to_payload(model, config, scaling)
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "config_digest": config_digest,
            "training_log_digest": log_digest,
            "writer": "ecglatent-0.1.0",
        },
        sort_keys=True,
    ).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(header))
    _atomic_write_bytes(path, blob + header + payload)


def load_checkpoint(path):
    """Returns (model, variant_config_or_None, scaling, header_dict)."""
    _require(path, "train")
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CliError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != CHECKPOINT_VERSION:
        raise CliError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[10 : 10 + hlen].decode())
    model, config, scaling = lm.model_from_payload(blob[10 + hlen :])
    return model, config, scaling, header


# ---------------------------------------------------------------------------
# shared pipeline pieces


def _load_beats(cfg: RunConfig):
    _require(cfg.beats_path, "preprocess")
    _require(cfg.scaling_path, "preprocess")
    records = sio.read_dataset(cfg.beats_path)
    beats_uv = np.stack([r.signal.astype(np.float64) for r in records])
    ids = [r.id for r in records]
    with open(cfg.scaling_path) as f:
        sdata = json.load(f)
    scaling = pp.ScalingParams(sdata["abs_max"], np.asarray(sdata["per_lead_mean"]))
    scaled = np.stack([scaling.apply(b) for b in beats_uv])
    return ids, beats_uv, scaled, scaling


def _train_indices(ids, cfg: RunConfig):
    train_idx, test_idx = mx.split_by_id(ids, cfg.test_fraction)
    if cfg.train_fraction < 1.0:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xF4AC]))
        order = rng.permutation(len(train_idx))
        keep = max(1, int(round(cfg.train_fraction * len(train_idx))))
        train_idx = [train_idx[i] for i in sorted(order[:keep])]
    return train_idx, test_idx


def _encode_to_rows(model, scaled_beats, ids, epsilon_seed, latent_dim):
    rows = []
    if isinstance(model, lm.IncrementalPca):
        codes = model.transform(scaled_beats.reshape(len(ids), -1))
        for i, rec_id in enumerate(ids):
            mu = codes[i]
            rows.append(
                [rec_id]
                + [_fmt(v) for v in mu]
                + [""] * latent_dim
                + [_fmt(v) for v in mu]
            )
        return rows
    encs = model.encode_batch(scaled_beats, epsilon_seed)
    for rec_id, enc in zip(ids, encs):
        logvar = (
            [""] * latent_dim if enc.deterministic else [_fmt(v) for v in enc.log_var]
        )
        rows.append(
            [rec_id] + [_fmt(v) for v in enc.mu] + logvar + [_fmt(v) for v in enc.z]
        )
    return rows


def _reconstruct_uv(model, scaled_beats, scaling, epsilon_seed):
    if isinstance(model, lm.IncrementalPca):
        codes = model.transform(scaled_beats.reshape(scaled_beats.shape[0], -1))
        rec_scaled = model.inverse_transform(codes).reshape(scaled_beats.shape)
    else:
        rec_scaled = model.reconstruct(scaled_beats, epsilon_seed)
    return np.stack([scaling.invert(b) for b in rec_scaled])


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x515E]))
    records = []
    for i in range(cfg.corpus_records):
        params = sio.random_beat_params(rng, cfg.corpus_noise_std_uv)
        records.append(
            sio.generate_synthetic_ecg(
                params,
                cfg.corpus_duration_s,
                cfg.corpus_sample_rate_hz,
                record_id=f"rec{i:05d}",
            )
        )
    os.makedirs(os.path.dirname(cfg.dataset_path) or ".", exist_ok=True)
    sio.write_dataset(records, cfg.dataset_path)
    _write_meta(cfg.dataset_path, cfg.digest())
    print(f"wrote {len(records)} records to {cfg.dataset_path}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    _require(cfg.dataset_path, "synth")
    records = sio.read_dataset(cfg.dataset_path)
    if not records:
        raise CliError(f"{cfg.dataset_path} contains no records")
    kors = pp.load_kors_matrix(cfg.kors_matrix_path or None)
    beats = [pp.record_to_xyz_beat(r, kors) for r in records]
    scaled, scaling = pp.scale_dataset(beats)
    out_records = [
        sio.EcgRecord(b.source_id, pp.BEAT_RATE_HZ, pp.XYZ_LEADS, b.samples)
        for b in beats  # stored unscaled (uV); scaling params travel separately
    ]
    os.makedirs(os.path.dirname(cfg.beats_path) or ".", exist_ok=True)
    sio.write_dataset(out_records, cfg.beats_path)
    _write_meta(cfg.beats_path, cfg.digest())
    _atomic_write_text(
        cfg.scaling_path,
        json.dumps(
            {
                "abs_max": scaling.abs_max,
                "per_lead_mean": scaling.per_lead_mean.tolist(),
                "config_digest": cfg.digest(),
            },
            sort_keys=True,
        )
        + "\n",
    )
    print(f"wrote {len(beats)} beats to {cfg.beats_path}")
    return 0


def _make_variant_config(cfg: RunConfig) -> lm.VariantConfig:
    return lm.VariantConfig.for_variant(
        cfg.variant,
        scale=cfg.scale,
        latent_dim=cfg.latent_dim,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
    )


def cmd_train(cfg: RunConfig) -> int:
    ids, beats_uv, scaled, scaling = _load_beats(cfg)
    train_idx, _ = _train_indices(ids, cfg)
    x_train = scaled[train_idx]

    log_rows = []
    if cfg.variant == "PCA":
        model = lm.IncrementalPca(cfg.latent_dim)
        flat = x_train.reshape(len(train_idx), -1)
        for start in range(0, len(flat), max(cfg.batch_size, cfg.latent_dim + 1)):
            model.partial_fit(flat[start : start + max(cfg.batch_size, cfg.latent_dim + 1)])
        config = None
    else:
        config = _make_variant_config(cfg)
        model = lm.build_network(config, init_seed=cfg.seed)
        logs = lm.train(model, x_train, config, seed=cfg.seed)
        for entry in logs:
            L = entry.loss
            log_rows.append(
                [entry.epoch]
                + [_fmt(v) for v in (L.l_p, L.l_qrs, L.l_t, L.l_e, L.kl, L.beta, L.total)]
            )

    log_text = _csv_text(
        ["epoch", "l_p", "l_qrs", "l_t", "l_e", "kl", "beta", "total"],
        log_rows,
        cfg.digest(),
    )
    log_path = os.path.splitext(cfg.checkpoint_path)[0] + "_train_log.csv"
    _atomic_write_text(log_path, log_text)
    log_digest = hashlib.sha256(log_text.encode()).hexdigest()[:16]
    save_checkpoint(cfg.checkpoint_path, model, config, scaling, cfg.digest(), log_digest)
    print(f"trained {cfg.variant} on {len(train_idx)} beats -> {cfg.checkpoint_path}")
    return 0


def cmd_encode(cfg: RunConfig) -> int:
    model, _, scaling, _ = load_checkpoint(cfg.checkpoint_path)
    ids, beats_uv, scaled, file_scaling = _load_beats(cfg)
    scaling = scaling or file_scaling
    latent_dim = (
        model.n_components
        if isinstance(model, lm.IncrementalPca)
        else model.config.latent_dim
    )
    header = (
        ["id"]
        + [f"mu_{i}" for i in range(latent_dim)]
        + [f"logvar_{i}" for i in range(latent_dim)]
        + [f"z_{i}" for i in range(latent_dim)]
    )
    rows = _encode_to_rows(model, scaled, ids, cfg.seed, latent_dim)
    out = os.path.join(cfg.out_dir, f"encodings_{cfg.variant}.csv")
    _atomic_write_text(out, _csv_text(header, rows, cfg.digest()))
    print(f"wrote {len(rows)} encodings to {out}")
    return 0


def _svg_overlay(original: np.ndarray, recon: np.ndarray, title: str) -> str:
    """Static SVG line chart of original vs reconstructed X/Y/Z leads."""
    width, height, pane = 760, 540, 170
    lo = min(original.min(), recon.min())
    hi = max(original.max(), recon.max())
    span = (hi - lo) or 1.0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="10" y="16" font-size="13">{title}</text>',
    ]
    for li, lead in enumerate(pp.XYZ_LEADS):
        y0 = 30 + li * pane
        parts.append(
            f'<text x="10" y="{y0 + 12}" font-size="11">{lead}</text>'
        )
        for sig, color in ((original[li], "#1f77b4"), (recon[li], "#ff7f0e")):
            pts = " ".join(
                f"{10 + 740 * i / (len(sig) - 1):.1f},"
                f"{y0 + (pane - 20) * (1 - (v - lo) / span):.1f}"
                for i, v in enumerate(sig)
            )
            parts.append(
                f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts)


def cmd_reconstruct(cfg: RunConfig) -> int:
    model, _, scaling, _ = load_checkpoint(cfg.checkpoint_path)
    ids, beats_uv, scaled, file_scaling = _load_beats(cfg)
    scaling = scaling or file_scaling
    rec_uv = _reconstruct_uv(model, scaled, scaling, cfg.seed)

    out_records = [
        sio.EcgRecord(ids[i], pp.BEAT_RATE_HZ, pp.XYZ_LEADS, rec_uv[i])
        for i in range(len(ids))
    ]
    rec_path = os.path.join(cfg.out_dir, f"reconstructed_{cfg.variant}.ecgl")
    sio.write_dataset(out_records, rec_path)
    _write_meta(rec_path, cfg.digest())

    rows = []
    for i, rec_id in enumerate(ids):
        r = mx.reconstruction_metrics(beats_uv[i], rec_uv[i])
        rows.append(
            [rec_id]
            + [_fmt(getattr(r, f)) for f in mx.REPORT_FIELDS]
            + [_fmt(r.per_lead_mae[l]) for l in pp.XYZ_LEADS]
            + [_fmt(r.per_lead_dtw[l]) for l in pp.XYZ_LEADS]
        )
    header = (
        ["id"]
        + list(mx.REPORT_FIELDS)
        + [f"mae_{l}" for l in pp.XYZ_LEADS]
        + [f"dtw_{l}" for l in pp.XYZ_LEADS]
    )
    report_path = os.path.join(cfg.out_dir, f"reconstruction_{cfg.variant}.csv")
    _atomic_write_text(report_path, _csv_text(header, rows, cfg.digest()))

    for i in range(min(cfg.plot_count, len(ids))):
        svg = _svg_overlay(
            beats_uv[i], rec_uv[i], f"{ids[i]} original vs {cfg.variant} reconstruction"
        )
        _atomic_write_text(
            os.path.join(cfg.out_dir, f"beat_{ids[i]}_{cfg.variant}.svg"), svg
        )
    print(f"wrote {report_path}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    if cfg.checkpoints:
        paths = [p.strip() for p in cfg.checkpoints.split(",") if p.strip()]
    else:
        paths = sorted(
            os.path.join(cfg.out_dir, n)
            for n in os.listdir(cfg.out_dir)
            if n.endswith(".ckpt")
        ) if os.path.isdir(cfg.out_dir) else []
    if not paths:
        raise CliError("no checkpoints found; run 'train' first or set 'checkpoints'")
    ids, beats_uv, scaled, file_scaling = _load_beats(cfg)
    _, test_idx = mx.split_by_id(ids, cfg.test_fraction)
    if not test_idx:
        raise CliError("test split is empty; lower test_fraction or add records")

    summary_rows = []
    lead_rows = []
    for path in paths:
        model, vconfig, scaling, _ = load_checkpoint(path)
        scaling = scaling or file_scaling
        name = (
            "PCA"
            if isinstance(model, lm.IncrementalPca)
            else vconfig.variant
        )
        rec_uv = _reconstruct_uv(model, scaled[test_idx], scaling, cfg.seed)
        reports = [
            mx.reconstruction_metrics(beats_uv[i], rec_uv[k])
            for k, i in enumerate(test_idx)
        ]
        stats = mx.summarize_reports(reports)
        summary_rows.append(
            [name]
            + [
                _fmt(v)
                for f in mx.REPORT_FIELDS
                for v in stats[f]
            ]
        )
        lead_rows.append(
            [name]
            + [
                _fmt(v)
                for l in pp.XYZ_LEADS
                for v in stats[f"mae_{l}"]
            ]
            + [
                _fmt(v)
                for l in pp.XYZ_LEADS
                for v in stats[f"dtw_{l}"]
            ]
        )

    header1 = ["model"] + [
        f"{f}_{s}" for f in mx.REPORT_FIELDS for s in ("avg", "sd")
    ]
    header2 = (
        ["model"]
        + [f"mae_{l}_{s}" for l in pp.XYZ_LEADS for s in ("avg", "sd")]
        + [f"dtw_{l}_{s}" for l in pp.XYZ_LEADS for s in ("avg", "sd")]
    )
    path1 = os.path.join(cfg.out_dir, "evaluation_full.csv")
    path2 = os.path.join(cfg.out_dir, "evaluation_per_lead.csv")
    _atomic_write_text(path1, _csv_text(header1, summary_rows, cfg.digest()))
    _atomic_write_text(path2, _csv_text(header2, lead_rows, cfg.digest()))

    _print_table(header1, summary_rows)
    print(f"wrote {path1} and {path2}")
    return 0


def _print_table(header, rows):
    widths = [
        max(len(str(header[c])), *(len(str(r[c])) for r in rows)) if rows else len(header[c])
        for c in range(len(header))
    ]
    line = "  ".join(h.ljust(w) for h, w in zip(header, widths))
    print(line)
    print("-" * len(line))
    for r in rows:
        print("  ".join(str(v).ljust(w) for v, w in zip(r, widths)))


def cmd_probe(cfg: RunConfig) -> int:
    model, _, scaling, _ = load_checkpoint(cfg.checkpoint_path)
    ids, beats_uv, scaled, file_scaling = _load_beats(cfg)
    scaling = scaling or file_scaling
    train_idx, test_idx = _train_indices(ids, cfg)
    if len(train_idx) <= cfg.latent_dim:
        raise CliError("probe needs more training beats than latent dimensions")

    def encode_codes(idx):
        sub = scaled[idx]
        if isinstance(model, lm.IncrementalPca):
            return model.transform(sub.reshape(len(idx), -1))
        return np.stack([e.z for e in model.encode_batch(sub, cfg.seed)])

    codes_train = encode_codes(train_idx)
    codes_test = encode_codes(test_idx)
    targets_train = mx.measure_dataset(beats_uv[train_idx])
    targets_test = mx.measure_dataset(beats_uv[test_idx])

    rows = []
    for target in ("qrs_duration_ms", "amplitude_qrs_3d_uv", "vti_qrs_3d_uvs"):
        probe = mx.fit_linear_probe(codes_train, targets_train[target])
        r = mx.evaluate_probe(probe, codes_test, targets_test[target])
        rows.append(
            [cfg.variant, target, "regression", _fmt(r.r2), _fmt(r.mae), _fmt(r.mae_sd), "", ""]
        )
    # binary task: VTI above the training-set median
    vti_median = float(np.median(targets_train["vti_qrs_3d_uvs"]))
    y_train = (targets_train["vti_qrs_3d_uvs"] > vti_median).astype(int)
    y_test = (targets_test["vti_qrs_3d_uvs"] > vti_median).astype(int)
    probe = mx.fit_logistic_probe(codes_train, y_train)
    r = mx.evaluate_probe(probe, codes_test, y_test)
    rows.append(
        [
            cfg.variant,
            "vti_above_median",
            "classification",
            "",
            "",
            "",
            _fmt(r.auroc),
            _fmt(r.sensitivity_at_spec90),
        ]
    )
    header = ["model", "target", "task", "r2", "mae", "mae_sd", "auroc", "sensitivity_at_spec90"]
    out = os.path.join(cfg.out_dir, f"probe_{cfg.variant}.csv")
    _atomic_write_text(out, _csv_text(header, rows, cfg.digest()))
    _print_table(header, rows)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "encode": cmd_encode,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "probe": cmd_probe,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecglatent",
        description="Compress ECG representative beats into 30-dim latent encodings.",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="TOML-like key = value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument(
        "--variant",
        choices=list(lm.VARIANTS) + ["PCA"],
        default=None,
        help="model variant (train/encode/reconstruct/probe)",
    )
    parser.add_argument("--train-fraction", type=float, default=None)
    parser.add_argument("--kors-matrix", default=None)
    parser.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EcgLatentError as e:
        print(f"error ({type(e).__name__}): {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
