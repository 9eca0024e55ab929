"""Configuration-driven command line: train, score, report, decompose, mix
and optimize-latents subcommands over INI experiment configs.

Exit codes: 0 success, 2 usage/config problems, 3 numeric failures.
"""

import argparse
import configparser
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, evaluation, training
from .data import (
    LabeledDataset,
    fit_pixel_diff_histogram,
    gen_synthetic,
    grayscale_images,
    load_idx_dataset,
)
from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DomainError,
    FormatError,
    NumericsError,
    ShapeError,
    SingularityError,
    StateError,
)
from .models import ModelConfig, build_variant, mix_latents, optimize_early_latents
from .tensor import Tensor

USAGE_ERRORS = (ConfigError, ContractError, FormatError, ShapeError, StateError)
NUMERIC_ERRORS = (NumericsError, SingularityError, DomainError, DegenerateInputError)


class ExperimentConfig:
    """Parsed experiment file plus provenance (hash, effective seed)."""

    def __init__(self, path, seed_override=None):
        self.path = Path(path)
        if not self.path.exists():
            raise ConfigError(f"config file not found: {path}")
        raw = self.path.read_bytes()
        self.sha256 = hashlib.sha256(raw).hexdigest()
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        try:
            parser.read_string(raw.decode("utf-8"))
        except (configparser.Error, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        self.parser = parser
        self.seed_override = seed_override

    def header_lines(self):
        seed = self.effective_seed()
        return [f"config_sha256={self.sha256}", f"seed={seed}"]

    def effective_seed(self):
        if self.seed_override is not None:
            return self.seed_override
        return self.parser.getint("model", "seed", fallback=0)

    def model_config(self):
        sec = self.parser["model"] if self.parser.has_section("model") else {}
        shape = _parse_shape(sec.get("input_shape", "1x16x16"))
        seed = self.seed_override
        try:
            if seed is None:
                seed = int(sec.get("seed", "0"))
            return ModelConfig(
                variant=sec.get("variant", "conv"),
                input_shape=shape,
                num_scales=int(sec.get("scales", "2")),
                steps_per_scale=int(sec.get("steps", "4")),
                hidden_width=int(sec.get("hidden", "32")),
                dense_hidden=int(sec.get("dense_hidden", "0")),
                patch_size=int(sec.get("patch_size", "8")),
                prior=sec.get("prior", "standard_normal"),
                num_classes=int(sec.get("classes", "1")),
                seed=seed,
            )
        except ValueError as e:
            raise ConfigError(f"bad [model] value: {e}") from e

    def train_config(self):
        sec = self.parser["train"] if self.parser.has_section("train") else {}
        seed = self.seed_override
        try:
            if seed is None:
                seed = int(sec.get("seed", "0"))
            return training.TrainConfig(
                learning_rate=float(sec.get("learning_rate", "5e-4")),
                weight_decay=float(sec.get("weight_decay", "5e-5")),
                epochs=int(sec.get("epochs", "10")),
                batch_size=int(sec.get("batch_size", "32")),
                temperature=float(sec.get("temperature", "1000")),
                outlier_weight=float(sec.get("outlier_weight", "6000")),
                margin=float(sec.get("margin", "100")),
                loss=sec.get("loss", "nll_only"),
                augment_translate=int(sec.get("augment_translate", "0")),
                augment_flip=_parse_bool(sec.get("augment_flip", "false")),
                dequantize=_parse_bool(sec.get("dequantize", "true")),
                seed=seed,
            )
        except ValueError as e:
            raise ConfigError(f"bad [train] value: {e}") from e

    def dataset(self, name):
        """Load a [data] entry; ' + '-joined specs are pooled in order."""
        if not self.parser.has_option("data", name):
            raise ConfigError(f"no dataset {name!r} in [data] section")
        spec = self.parser.get("data", name)
        default_shape = self.model_config().input_shape
        parts = [
            _load_dataset_spec(s.strip(), default_shape, self.path.parent)
            for s in spec.split(" + ")
        ]
        ds = parts[0]
        if len(parts) > 1:
            shapes = {p.images.shape[1:] for p in parts}
            if len(shapes) > 1:
                raise ConfigError(f"pooled datasets disagree on shape: {sorted(shapes)}")
            images = np.concatenate([p.images for p in parts])
            if all(p.labels is not None for p in parts):
                labels = np.concatenate([p.labels for p in parts])
            else:
                labels = None
            ds = LabeledDataset(images=images, labels=labels, split=ds.split)
        if _parse_bool(self.parser.get("data", "grayscale", fallback="false")):
            if ds.images.shape[1] == 3:
                ds = LabeledDataset(grayscale_images(ds.images), ds.labels, ds.split)
        return ds

    def option(self, section, key, fallback=None):
        return self.parser.get(section, key, fallback=fallback)


def _parse_bool(text):
    return str(text).strip().lower() in ("1", "true", "yes", "on")


def _parse_shape(text):
    try:
        parts = tuple(int(p) for p in text.lower().replace("x", " ").split())
    except ValueError as e:
        raise ConfigError(f"bad shape spec {text!r}") from e
    if len(parts) != 3:
        raise ConfigError(f"shape must have 3 dims (CxHxW), got {text!r}")
    return parts


def _load_dataset_spec(spec, default_shape, base_dir):
    """'synthetic:smooth:n=100:seed=3[:blur=2][:shape=1x8x8]' or 'idx:images[:labels]'."""
    parts = spec.split(":")
    kind = parts[0].strip().lower()
    if kind == "synthetic":
        if len(parts) < 2:
            raise ConfigError(f"synthetic spec needs a domain: {spec!r}")
        domain = parts[1].strip()
        opts = {}
        for item in parts[2:]:
            if "=" not in item:
                raise ConfigError(f"bad synthetic option {item!r}")
            k, v = item.split("=", 1)
            opts[k.strip()] = v.strip()
        shape = _parse_shape(opts["shape"]) if "shape" in opts else default_shape
        try:
            return gen_synthetic(
                domain,
                int(opts.get("n", "100")),
                shape,
                int(opts.get("seed", "0")),
                blur_passes=int(opts.get("blur", "1")),
            )
        except ValueError as e:
            raise ConfigError(f"bad synthetic option in {spec!r}: {e}") from e
    if kind == "idx":
        if len(parts) < 2:
            raise ConfigError(f"idx spec needs an image path: {spec!r}")
        img = base_dir / parts[1].strip()
        lbl = base_dir / parts[2].strip() if len(parts) > 2 and parts[2].strip() else None
        return load_idx_dataset(str(img), str(lbl) if lbl else None)
    raise ConfigError(f"unknown dataset kind {kind!r} in {spec!r}")


def _load_general_model(cfg, *sections):
    for section in sections:
        path = cfg.option(section, "general_checkpoint")
        if path:
            full = (cfg.path.parent / path) if not Path(path).is_absolute() else Path(path)
            if not full.exists():
                raise ConfigError(f"general checkpoint not found: {full}")
            return checkpoint.load_model(str(full))
    return None


def _out_path(args, cfg, default_name):
    out_dir = Path(args.out_dir) if args.out_dir else cfg.path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir / default_name


def cmd_train(args):
    cfg = ExperimentConfig(args.config, seed_override=args.seed)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    finetune_from = cfg.option("train", "finetune_from")
    if finetune_from:
        path = cfg.path.parent / finetune_from
        if not path.exists():
            raise ConfigError(f"finetune checkpoint not found: {path}")
        model = checkpoint.load_model(str(path))
    else:
        model = build_variant(model_cfg)

    train_ds = cfg.dataset("train")
    train_x = evaluation.preprocess_train(train_ds.images)
    labels = train_ds.labels if model_cfg.prior == "gaussian_mixture" else None

    general_x = general_model = None
    if train_cfg.loss in ("nll_plus_outlier", "nll_plus_margin"):
        if not cfg.parser.has_option("data", "general"):
            raise ConfigError(f"{train_cfg.loss} requires a 'general' dataset")
        general_x = evaluation.preprocess_train(cfg.dataset("general").images)
        if train_cfg.loss == "nll_plus_outlier":
            general_model = _load_general_model(cfg, "train", "eval")
            if general_model is None:
                raise ConfigError("outlier loss requires a general_checkpoint")

    model, history = training.train(
        model, train_x, train_cfg, general_x=general_x, general_model=general_model, labels=labels
    )
    ck_path = _out_path(args, cfg, "model.flow")
    checkpoint.save_model(model, str(ck_path))
    hist_path = _out_path(args, cfg, "history.txt")
    training.write_history(history, str(hist_path), header_lines=cfg.header_lines())
    print(f"checkpoint: {ck_path}")
    print(f"history: {hist_path}")
    return 0


def cmd_score(args):
    cfg = ExperimentConfig(args.config, seed_override=args.seed)
    model = checkpoint.load_model(args.checkpoint)
    ds = cfg.dataset(args.dataset)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    general_model = _load_general_model(cfg, "eval", "train")
    hist = None
    if "pseudo" in methods:
        ref = cfg.dataset(cfg.option("eval", "pseudo_reference", fallback="train"))
        hist = fit_pixel_diff_histogram(ref.images)
    table = evaluation.score_examples(
        model, ds.images, methods, general_model=general_model, baselines=hist
    )
    out = Path(args.out) if args.out else _out_path(args, cfg, f"scores_{args.dataset}.csv")
    table.write(str(out), header_lines=cfg.header_lines())
    print(f"scores: {out}")
    return 0


def cmd_report(args):
    cfg = ExperimentConfig(args.config, seed_override=args.seed)
    if not cfg.parser.has_section("report"):
        raise ConfigError("config has no [report] section")
    sec = cfg.parser["report"]
    lines = []
    for key in sec:
        value = sec.get(key)
        if key.startswith("pair"):
            fields = value.split()
            if len(fields) != 3:
                raise ConfigError(f"pair needs 'inlier.csv outlier.csv method': {value!r}")
            in_tab = evaluation.ScoreTable.read(str(cfg.path.parent / fields[0]))
            out_tab = evaluation.ScoreTable.read(str(cfg.path.parent / fields[1]))
            auc = evaluation.auroc(in_tab.column(fields[2]), out_tab.column(fields[2]))
            lines.append(f"auroc\t{key}\t{fields[2]}\t{100.0 * auc:.1f}")
        elif key.startswith("spearman"):
            fields = value.split()
            if len(fields) != 2:
                raise ConfigError(f"spearman needs 'a.csv#col b.csv#col': {value!r}")
            cols = []
            for field in fields:
                fname, _, col = field.partition("#")
                tab = evaluation.ScoreTable.read(str(cfg.path.parent / fname))
                cols.append(tab.column(col))
            rho = evaluation.spearman(cols[0], cols[1])
            lines.append(f"spearman\t{key}\t{fields[0]}~{fields[1]}\t{rho:.6f}")
        elif key.startswith("bpd"):
            fields = value.split()
            if len(fields) != 3:
                raise ConfigError(f"bpd needs 'table.csv column dims': {value!r}")
            tab = evaluation.ScoreTable.read(str(cfg.path.parent / fields[0]))
            vals = tab.column(fields[1])
            bpd = training.bits_per_dim(float(np.mean(vals)), int(fields[2]))
            lines.append(f"bpd\t{key}\t{fields[1]}\t{bpd:.6f}")
    out = Path(args.out) if args.out else _out_path(args, cfg, "report.txt")
    with open(out, "w", encoding="utf-8") as f:
        for line in cfg.header_lines():
            f.write(f"# {line}\n")
        for line in lines:
            f.write(line + "\n")
    print(f"report: {out}")
    return 0


def cmd_decompose(args):
    cfg = ExperimentConfig(args.config, seed_override=args.seed)
    model = checkpoint.load_model(args.checkpoint)
    if model.num_scales < 2:
        raise ContractError("decompose needs a multi-scale model")
    ds = cfg.dataset(args.dataset)
    x = evaluation.noise_free_eval(ds.images)
    out = model.log_prob_graph(Tensor(x))
    cs = [c.data for c in out.contributions]
    totals = out.total.data
    names = [f"c_{i + 1}" for i in range(model.num_scales)]
    table = evaluation.ScoreTable(["id"] + names + ["total"])
    worst = 0.0
    for i in range(len(ds.images)):
        row = {"id": str(i), "total": float(totals[i])}
        for j, nm in enumerate(names):
            row[nm] = float(cs[j][i])
        worst = max(worst, abs(sum(float(cs[j][i]) for j in range(len(names))) - totals[i]))
        table.append(**row)
    table.append(id="check_max_abs_sum_minus_total", total=worst, **{n: 0.0 for n in names})
    out_path = Path(args.out) if args.out else _out_path(args, cfg, f"decompose_{args.dataset}.csv")
    table.write(str(out_path), header_lines=cfg.header_lines())
    print(f"decomposition: {out_path} (max |sum c_i - total| = {worst:.3e})")
    return 0


def _write_image(path, pixels, header_lines):
    """ASCII PGM/PPM with provenance comments."""
    arr = np.asarray(pixels)
    c, h, w = arr.shape
    if c == 1:
        magic, rows = "P2", arr[0]
    elif c == 3:
        magic, rows = "P3", np.moveaxis(arr, 0, -1).reshape(h, w * 3)
    else:
        raise ContractError(f"can only write 1- or 3-channel images, got {c}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{magic}\n")
        for line in header_lines:
            f.write(f"# {line}\n")
        f.write(f"{w} {h}\n255\n")
        for row in rows:
            f.write(" ".join(str(int(v)) for v in row) + "\n")


def _to_pixels(x):
    """Invert the noise-free preprocessing and clamp to the 8-bit grid."""
    return np.clip(np.rint((x + 0.5) * 256.0 - 0.5), 0, 255).astype(np.uint8)


def cmd_mix(args):
    cfg = ExperimentConfig(args.config, seed_override=args.seed)
    model = checkpoint.load_model(args.checkpoint)
    ds = cfg.dataset(args.dataset)
    scales = set()
    if args.scales.strip():
        try:
            scales = {int(s) for s in args.scales.split(",") if s.strip()}
        except ValueError as e:
            raise ConfigError(f"bad --scales list {args.scales!r}") from e
    xa = Tensor(evaluation.noise_free_eval(ds.images[args.index_a]))
    xb = Tensor(evaluation.noise_free_eval(ds.images[args.index_b]))
    mixed = mix_latents(model, xa, xb, scales)
    out = Path(args.out) if args.out else _out_path(args, cfg, "mixed.pgm")
    _write_image(str(out), _to_pixels(mixed.data), cfg.header_lines())
    print(f"mixed image: {out}")
    return 0


def cmd_optimize_latents(args):
    cfg = ExperimentConfig(args.config, seed_override=args.seed)
    model = checkpoint.load_model(args.checkpoint)
    ds = cfg.dataset(args.dataset)
    x = Tensor(evaluation.noise_free_eval(ds.images[args.index]))
    result = optimize_early_latents(model, x, steps=args.steps, step_size=args.step_size)
    out = Path(args.out) if args.out else _out_path(args, cfg, "optimized.pgm")
    headers = cfg.header_lines() + [
        f"log_prob_start={result.log_probs[0]!r}",
        f"log_prob_end={result.log_probs[-1]!r}",
    ]
    _write_image(str(out), _to_pixels(result.image.data), headers)
    print(f"optimized image: {out} (log p {result.log_probs[0]:.3f} -> {result.log_probs[-1]:.3f})")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="flowad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="experiment config file (INI)")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        p.add_argument("--out-dir", default=None, help="directory for outputs")

    p = sub.add_parser("train", help="train a model, write checkpoint + history")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score a dataset under a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset key from [data]")
    p.add_argument("--methods", default="raw")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("report", help="AUROC / correlation / bpd report from score tables")
    common(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("decompose", help="per-scale likelihood contributions")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("mix", help="splice latent scales of two images and decode")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index-a", type=int, required=True)
    p.add_argument("--index-b", type=int, required=True)
    p.add_argument("--scales", default="", help="comma list of scales taken from image B")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("optimize-latents", help="gradient-ascend early latents, decode")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_optimize_latents)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NUMERIC_ERRORS as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
