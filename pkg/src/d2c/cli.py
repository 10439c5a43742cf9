"""Command-line entry point: ``d2c <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 1 runtime error (message names the
failing component).
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import ConfigError, D2CError

CKPT_NAME = "model.ckpt"


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------------------


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _label(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError("label must look like attribute=value")
    attr, value = text.split("=", 1)
    return attr.strip(), value.strip()


def _prepare_out(out: Path, force: bool) -> Path:
    occupied = out.is_file() or (out.is_dir() and any(out.iterdir()))
    if occupied:
        if not force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if v != v else repr(float(v))
    return v


def _write_report(path: Path, items: dict) -> None:
    _write_csv(path, ("key", "value"), items.items())


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _read_label_file(path) -> dict[int, int]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"index", "label"}:
            raise ConfigError("label file must have header 'index,label'")
        return {int(r["index"]): int(r["label"]) for r in reader}


def _model_and_data(args):
    from .trainer import load_checkpoint, load_dataset, split_dataset

    model = load_checkpoint(args.ckpt)
    train_set, held = split_dataset(load_dataset(model.config), model.config.holdout)
    return model, train_set, held


def _training_labels(args, train_set) -> np.ndarray:
    """Binary labels for the training split from ``--labels`` or ``--label``."""
    if args.labels:
        table = _read_label_file(args.labels)
        y = np.full(len(train_set), -1)
        for i, v in table.items():
            if 0 <= i < len(y):
                y[i] = v
        return y
    if not train_set.attributes:
        raise UsageError("dataset has no attributes; supply --labels")
    return train_set.labels(*args.label)


def _classifier(args, model, train_set, rng):
    from .conditional import fit_classifier, fit_pu_classifier

    z = model.encode(train_set.images)
    y = _training_labels(args, train_set)
    known = y >= 0
    if args.pu:
        pos = np.flatnonzero(y == 1)[: args.n_labels]
        rest = np.setdiff1d(np.arange(len(z)), pos)
        return fit_pu_classifier(z[pos], z[rest], rng=rng)
    # balanced subset of labeled rows
    per_class = max(1, args.n_labels // 2)
    idx = np.concatenate([np.flatnonzero(known & (y == c))[:per_class] for c in (0, 1)])
    return fit_classifier(z[idx], y[idx])


def _save_classifier(path: Path, clf) -> None:
    from .trainer import tables_to_bytes

    tables = {"classifier/w": clf.weight, "classifier/b": np.array([clf.bias]), "classifier/c_pu": np.array([clf.c_pu])}
    path.write_bytes(tables_to_bytes(tables))


def _oracle_attrs(images) -> list[dict[str, str]]:
    from .data import oracle

    return [oracle(img) for img in images]


# -- subcommands ---------------------------------------------------------------------------


def cmd_gen_data(args, out: Path) -> None:
    from .data import SyntheticSpec, generate_synthetic, save_archive, write_ppm

    cfg = _load_config(args)
    spec = SyntheticSpec(
        size=cfg.image_size,
        channels=cfg.channels,
        disc_rate=cfg.disc_rate,
        warm_rate=cfg.warm_rate,
        quadrant_probs=cfg.float_tuple("quadrant_probs"),
        count=args.n or cfg.n_images,
        seed=cfg.data_seed if args.seed is None else args.seed,
    )
    data = generate_synthetic(spec)
    save_archive(data, out / "data.d2cd")
    write_ppm(out / "preview.ppm", data.images[:64])


def cmd_train(args, out: Path) -> None:
    from .trainer import save_checkpoint, train, write_metrics

    cfg = _load_config(args)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    result = train(cfg, log=log)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    write_metrics(result, out / "metrics.csv")
    save_checkpoint(result.model, out / CKPT_NAME)


def cmd_sample(args, out: Path) -> None:
    from .data import TensorArchive, save_archive, write_ppm

    model, _, _ = _model_and_data(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else model.config.seed)
    z = model.prior_sample(args.n, rng, steps=args.steps, kind=args.sampler)
    images = model.decode(z)
    save_archive(TensorArchive(images.astype(np.float32), _oracle_attrs(images)), out / "samples.d2cd")
    write_ppm(out / "samples.ppm", images[:64])
    _write_csv(out / "latents.csv", [f"z{i}" for i in range(z.shape[1])], z.tolist())


def cmd_invert(args, out: Path) -> None:
    from .diffusion import SamplerSpec, ddim_invert, sample
    from .data import write_ppm
    from .schedule import subsample

    model, _, held = _model_and_data(args)
    x = held.images[: args.n].astype(np.float64)
    z = model.normalize(model.encode(x))
    levels = subsample(model.schedule, args.steps)
    noise = ddim_invert(model.predictor, levels, z)
    back = sample(model.predictor, SamplerSpec("ddim", model.schedule, args.steps), len(z), None, noise=noise)
    recon = model.decode(model.denormalize(back))
    rel = np.linalg.norm(back - z, axis=1) / np.maximum(np.linalg.norm(z, axis=1), 1e-12)
    pix = ((recon - x) ** 2).reshape(len(x), -1).sum(axis=1)
    _write_csv(
        out / "invert.csv",
        ("index", "latent_rel_err", "noise_norm", "pixel_sq_err"),
        [(i, rel[i], float(np.linalg.norm(noise[i])), pix[i]) for i in range(len(x))],
    )
    write_ppm(out / "invert.ppm", np.concatenate([x[:16], recon[:16]]), cols=min(16, len(x)))


def cmd_condition(args, out: Path) -> None:
    from .conditional import conditional_sample
    from .data import TensorArchive, save_archive, write_ppm
    from .evaluation import purity
    from .data import oracle

    model, train_set, _ = _model_and_data(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else model.config.seed)
    clf = _classifier(args, model, train_set, rng)
    images, z, stats = conditional_sample(model, clf, 1, args.n, rng, mode=args.mode, steps=args.steps)
    save_archive(TensorArchive(images.astype(np.float32), _oracle_attrs(images)), out / "samples.d2cd")
    write_ppm(out / "samples.ppm", images[:64])
    _save_classifier(out / "classifier.ckpt", clf)
    report = {
        "label": "=".join(args.label) if args.label else "file",
        "mode": args.mode,
        "classifier": "pu" if args.pu else "supervised",
        "n": len(images),
        "candidates": stats.candidates,
        "acceptance_rate": stats.rate,
        "c_pu": clf.c_pu,
    }
    if args.label and train_set.attributes:
        report["base_rate"] = float(train_set.labels(*args.label).mean())
        report["purity"] = purity(images, oracle, *args.label)
    _write_report(out / "report.csv", report)


def cmd_manipulate(args, out: Path) -> None:
    from .conditional import ManipulationSpec, manipulate
    from .data import write_ppm

    model, train_set, held = _model_and_data(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else model.config.seed)
    clf = _classifier(args, model, train_set, rng)
    eta = ManipulationSpec.default_eta(model.config.latent_dim) if args.eta == "auto" else float(args.eta)
    spec = ManipulationSpec(target=1, eta=eta, alpha=args.alpha, steps=args.denoise_steps, allow_any_alpha=args.any_alpha)
    x = held.images.astype(np.float64)
    if args.label and held.attributes:
        x = x[held.labels(*args.label) == 0]
    x = x[: args.n]
    if len(x) == 0:
        raise UsageError("no held-out images lack the target label")
    res = manipulate(model, clf, spec, x, rng)
    ref = model.decode(model.prior_sample(len(x), rng))
    d_src = ((res.image - x) ** 2).reshape(len(x), -1).sum(axis=1)
    d_ind = ((ref - x) ** 2).reshape(len(x), -1).sum(axis=1)
    _write_csv(
        out / "manipulate.csv",
        ("index", "score_before", "score_after", "displacement", "dist_to_source", "dist_to_independent"),
        [(i, res.score_before[i], res.score_after[i], res.displacement[i], d_src[i], d_ind[i]) for i in range(len(x))],
    )
    _write_report(out / "report.csv", {
        "eta": eta,
        "alpha": spec.alpha,
        "denoise_steps": spec.steps,
        "score_increased": float(np.mean(res.score_after > res.score_before)),
        "closer_than_independent": float(np.mean(d_src < d_ind)),
    })
    k = min(16, len(x))
    write_ppm(out / "manipulate.ppm", np.concatenate([x[:k], res.image[:k]]), cols=k)


def cmd_eval(args, out: Path) -> None:
    from .evaluation import fit_feature_extractor, linear_probe, reconstruction_mse, toy_fid
    from .trainer import _codes

    model, train_set, held = _model_and_data(args)
    rng = np.random.default_rng(args.seed if args.seed is not None else model.config.seed)
    x = held.images.astype(np.float64)
    rows = []
    recon_mse = reconstruction_mse(x, model.decode(model.encode(x)))
    probe = float("nan")
    if held.attributes:
        attr, value = model.config.probe_attribute.split("=", 1)
        y = held.labels(attr, value)
        mask = np.zeros(len(y), dtype=bool)
        for c in (0, 1):
            members = np.flatnonzero(y == c)
            mask[members[: min(args.n_labels // 2, len(members) // 2)]] = True
        probe = linear_probe(model.encode(x), y, mask)
    if train_set.attributes:
        targets = {a: _codes(train_set, a) for a in train_set.attributes[0]}
    else:
        targets = {"dummy": np.zeros(len(train_set), dtype=int)}
    fx = fit_feature_extractor(train_set.images.astype(np.float64), targets, seed=model.config.seed)
    noise = rng.standard_normal((args.n, model.config.latent_dim))
    for steps in args.steps_list:
        z = model.prior_sample(args.n, rng, steps=steps, kind=args.sampler, noise=noise)
        rows.append((args.sampler, steps, toy_fid(fx, x, model.decode(z)), recon_mse, probe))
    _write_csv(out / "eval.csv", ("sampler", "steps", "toy_fid", "recon_mse", "probe_acc"), rows)


def cmd_priorhole(args, out: Path) -> None:
    from .priorhole import HoleReport, hole_report

    rows = [
        hole_report(delta, n, args.dim, alpha).row()
        for delta in args.delta
        for n in args.n
        for alpha in args.alpha
    ]
    _write_csv(out / "priorhole.csv", HoleReport.FIELDS, rows)


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="training config file (key = value lines)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="replace an existing --out directory")
    common.add_argument("--threads", type=int, default=None, help="cap numerical worker threads")

    p = argparse.ArgumentParser(prog="d2c", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic TensorArchive")
    s.add_argument("--n", type=int, default=None, help="image count (default from config)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train a model; writes model.ckpt and metrics.csv")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    def model_cmd(name, func, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--ckpt", required=True, type=Path)
        s.set_defaults(func=func)
        return s

    def sampler_flags(s, steps_default=100):
        s.add_argument("--steps", type=int, default=steps_default, help="sampler step count")
        s.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")

    def label_flags(s):
        s.add_argument("--label", type=_label, default=None, help="attribute=value target")
        s.add_argument("--labels", type=Path, default=None, help="CSV index,label for the training split")
        s.add_argument("--n-labels", type=int, default=100, help="labeled examples used for the classifier")
        s.add_argument("--pu", action="store_true", help="positive-unlabeled classifier")

    s = model_cmd("sample", cmd_sample, "unconditional samples")
    s.add_argument("--n", type=int, default=64)
    sampler_flags(s)

    s = model_cmd("invert", cmd_invert, "DDIM inversion round trip on held-out images")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--steps", type=int, default=100)

    s = model_cmd("condition", cmd_condition, "label-conditional generation by rejection")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--mode", choices=("bernoulli", "threshold"), default="threshold")
    s.add_argument("--steps", type=int, default=100)
    label_flags(s)

    s = model_cmd("manipulate", cmd_manipulate, "edit held-out images toward a label")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--eta", default="1.0", help="ascent step size, or 'auto' for 0.5*sqrt(k)")
    s.add_argument("--alpha", type=float, default=0.9)
    s.add_argument("--denoise-steps", type=int, default=5)
    s.add_argument("--any-alpha", action="store_true", help="allow alpha outside [0.65, 0.9]")
    label_flags(s)

    s = model_cmd("eval", cmd_eval, "toy FID per step count, reconstruction MSE, probe accuracy")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--steps", dest="steps_list", type=_int_list, default=[10, 100])
    s.add_argument("--sampler", choices=("ddim", "ddpm"), default="ddim")
    s.add_argument("--n-labels", type=int, default=100)

    s = sub.add_parser("priorhole", parents=[common], help="prior-hole construction sweep")
    s.add_argument("--delta", type=_float_list, default=[0.49])
    s.add_argument("--n", type=_int_list, default=[1, 2, 4, 8])
    s.add_argument("--alpha", type=_float_list, default=[1.0])
    s.add_argument("--dim", type=int, default=1)
    s.set_defaults(func=cmd_priorhole)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command in ("condition", "manipulate") and args.label is None and args.labels is None:
        print("d2c: error: --label or --labels is required", file=sys.stderr)
        return 2
    if args.threads is not None and args.threads < 1:
        print("d2c: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        out = _prepare_out(args.out, args.force)
    except UsageError as exc:
        print(f"d2c: error: {exc}", file=sys.stderr)
        return 2
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    else:
        limiter = nullcontext()
    try:
        with limiter:
            args.func(args, out)
    except UsageError as exc:
        print(f"d2c: error: {exc}", file=sys.stderr)
        return 2
    except D2CError as exc:
        print(f"d2c: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"d2c: error: [{args.command}] {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
