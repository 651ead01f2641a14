"""Command-line interface.

Every command accepts ``--config`` (flat ``key = value`` file), ``--seed`` and
``--out``; explicit flags override config keys. Failures exit 1 with a single
``error: <category>: <message>`` line on stderr; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import io
from .data import SyntheticSpec, generate_synthetic
from .errors import BitDAEError, ConfigurationError, DataError
from .latent import ARPrior, LatentCode, NormalPrior, fit_ar_prior, fit_normal_prior
from .latent_tools import LinearProbe, classifier_translate, fit_linear_probe, interpolate_discrete
from .metrics import frechet_proxy, generate, latent_usage_stats, model_bpd, reconstruction_mse, write_metric_report
from .sampler import DMZModel, draw_codes, sample
from .trainer import TrainConfig, finetune, fit, load_state
from .translate import fit_latent_map, load_map, save_map, translate_image

log = logging.getLogger("bitdae")


# ---------------------------------------------------------------- helpers


def _resolve(args, known: set, flag_map: dict) -> dict:
    """Config file values, then explicit flags and ``--set`` overrides; keys limited to ``known``."""
    values = io.read_config(args.config) if args.config else {}
    for key, dest in flag_map.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = io.parse_value(v)
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    return values


def _seed(args, configured=None) -> int:
    """``--seed`` wins, then a seed from the config file, then a fresh random one."""
    if args.seed is not None:
        seed = args.seed
    elif configured is not None:
        seed = int(configured)
    else:
        seed = secrets.randbits(63)
    torch.manual_seed(seed)
    return seed


def _log_resolved(args, resolved: dict, seed: int) -> None:
    log.info("command: %s", args.command)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True, default=str))
    log.info("seed: %d", seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_config(out / f"{args.command}.resolved.cfg", {**resolved, "seed": seed})


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed % (2 ** 63))


def _model(path, use_ema: bool = True) -> DMZModel:
    return DMZModel.from_state(load_state(path), use_ema)


def _codes_arg(path) -> LatentCode:
    return LatentCode(torch.from_numpy(io.load_codes(path).astype(np.float32)), "hard")


def _load_prior(path):
    tensors, meta = io.load_checkpoint(path)
    if meta.get("kind") == "ar_prior":
        prior = ARPrior(meta["n_bits"], meta["hidden"], meta["n_hidden_layers"])
        prior.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        prior.eval()
        return prior
    if meta.get("kind") == "normal_prior":
        return NormalPrior(torch.from_numpy(tensors["mean"]), torch.from_numpy(tensors["std"]))
    raise ConfigurationError(f"{path} holds {meta.get('kind')!r}, not a prior")


# ---------------------------------------------------------------- commands


SYNTH_FLAGS = {"count": "count", "resolution": "resolution", "grid": "grid", "style": "style",
               "shapes": "shapes", "radii": "radii"}


def cmd_gen_data(args):
    known = {f.name for f in fields(SyntheticSpec)}
    values = _resolve(args, known, SYNTH_FLAGS)
    seed = values["seed"] = _seed(args, values.get("seed"))
    spec = SyntheticSpec(**values)
    _log_resolved(args, spec.to_dict(), seed)
    labels = None
    if args.labels_from:
        _, labels = io.load_dataset(args.labels_from)
    images, labels = generate_synthetic(spec, labels)
    out = Path(args.out)
    io.save_dataset(out / "data.npz", images, labels)
    io.export_images(images[:64], out / "data_preview.png")
    print(out / "data.npz")


TRAIN_FLAGS = {"total_iterations": "iterations", "learning_rate": "lr", "batch_size": "batch_size",
               "n_bits": "n_bits", "conditioning_mode": "mode", "T": "T", "schedule_kind": "schedule",
               "latent_kind": "latent_kind", "ema_decay": "ema_decay"}


def _train_config(args) -> tuple[TrainConfig, int]:
    values = _resolve(args, {f.name for f in fields(TrainConfig)}, TRAIN_FLAGS)
    values["seed"] = _seed(args, values.get("seed"))
    cfg = TrainConfig.from_dict(values)
    return cfg, cfg.seed


def _progress(step, loss):
    if step % 100 == 0:
        log.info("step %d loss %.5f", step, loss)


def cmd_train(args):
    cfg, seed = _train_config(args)
    _log_resolved(args, cfg.to_dict(), seed)
    data, _ = io.load_dataset(args.data)
    fit(data, cfg, out_dir=args.out, progress=_progress)
    print(Path(args.out) / "final.ckpt")


def cmd_finetune(args):
    cfg, seed = _train_config(args)
    _log_resolved(args, {**cfg.to_dict(), "finetune_mode": args.finetune_mode, "base": args.base}, seed)
    data, _ = io.load_dataset(args.data)
    finetune(args.base, cfg, args.finetune_mode, data, out_dir=args.out, progress=_progress)
    print(Path(args.out) / "final.ckpt")


def cmd_sample(args):
    seed = _seed(args)
    source = args.z_source[0]
    extra = args.z_source[1] if len(args.z_source) > 1 else None
    if len(args.z_source) > 2:
        raise ConfigurationError("--z-source takes a source and at most one path")
    _log_resolved(args, {"checkpoint": args.checkpoint, "count": args.count, "z_source": source,
                         "z_path": extra, "steps": args.steps, "ema": not args.no_ema}, seed)
    model = _model(args.checkpoint, not args.no_ema)
    g = _generator(seed)
    z = None
    if model.encoder is not None:
        if source in ("posterior", "ar", "normal") and extra is None:
            raise ConfigurationError(f"--z-source {source} needs a path")
        prior = _load_prior(extra) if source in ("ar", "normal") else None
        codes = _codes_arg(extra) if source == "posterior" else None
        z = draw_codes(source, args.count, model.n_bits, g, prior=prior, codes=codes)
    images = generate(model, z, args.count, args.steps, g, clip_x0=not args.no_clip_x0)
    png, raw = io.export_images(images, Path(args.out) / "samples.png")
    if z is not None and z.mode == "hard":
        io.save_codes(Path(args.out) / "samples.codes", z.values)
    print(png)


def cmd_encode(args):
    seed = _seed(args)
    _log_resolved(args, {"checkpoint": args.checkpoint, "data": args.data}, seed)
    model = _model(args.checkpoint, not args.no_ema)
    data, _ = io.load_dataset(args.data)
    z = model.encode(data)
    path = Path(args.out) / "codes.bin"
    if z.mode == "hard":
        io.save_codes(path, z.values)
        stats = latent_usage_stats(z)
        log.info("per-bit entropy: %s", np.round(stats["entropy_bits"], 3).tolist())
    else:
        path = path.with_suffix(".npy")
        np.save(path, z.values.numpy())
    print(path)


def cmd_fit_prior(args):
    seed = _seed(args)
    _log_resolved(args, {"codes": args.codes, "kind": args.kind, "hidden": args.hidden,
                         "epochs": args.epochs}, seed)
    out = Path(args.out) / "prior.ckpt"
    if args.kind == "normal":
        prior = fit_normal_prior(torch.from_numpy(np.load(args.codes)).float())
        io.save_checkpoint(out, {"mean": prior.mean, "std": prior.std}, {"kind": "normal_prior"})
    else:
        codes = io.load_codes(args.codes).astype(np.float32)
        prior = fit_ar_prior(codes, hidden=args.hidden, epochs=args.epochs, seed=seed % (2 ** 31))
        io.save_checkpoint(out, prior.state_dict(), {"kind": "ar_prior", "n_bits": prior.n_bits,
                                                     "hidden": prior.hidden,
                                                     "n_hidden_layers": prior.n_hidden_layers})
    print(out)


def cmd_interpolate(args):
    seed = _seed(args)
    _log_resolved(args, {"checkpoint": args.checkpoint, "data": args.data, "src": args.src_index,
                         "tgt": args.tgt_index, "steps": args.steps}, seed)
    model = _model(args.checkpoint)
    data, _ = io.load_dataset(args.data)
    z = model.encode(data[[args.src_index, args.tgt_index]]).values
    path = interpolate_discrete(z[0].numpy(), z[1].numpy(), np.random.default_rng(seed))
    codes = torch.as_tensor(np.stack(path), dtype=torch.float32)
    g = _generator(seed)
    x_T = torch.randn((1, *model.input_shape), generator=g).expand(len(path), -1, -1, -1)
    images = sample(model.denoiser, model.schedule_for(args.steps), LatentCode(codes, "hard"), x_T.contiguous(), g,
                    not args.no_clip_x0)
    io.save_codes(Path(args.out) / "path.codes", codes)
    print(io.export_images(images, Path(args.out) / "interpolation.png", nrow=len(path))[0])


def _probe_for(args, codes, labels):
    if args.probe:
        return LinearProbe.from_rows(io.read_report(args.probe))
    if args.factor not in labels:
        raise DataError(f"dataset has no labels for factor {args.factor!r}; have {sorted(labels)}")
    probe, metrics = fit_linear_probe(codes, labels[args.factor], split_seed=args.split_seed)
    log.info("probe metrics: %s", {k: v for k, v in metrics.items() if k != "split_accuracies"})
    return probe


def cmd_edit(args):
    seed = _seed(args)
    _log_resolved(args, {"checkpoint": args.checkpoint, "data": args.data, "index": args.index,
                         "factor": args.factor, "probe": args.probe, "deltas": args.deltas,
                         "binarize": args.binarize, "steps": args.steps}, seed)
    model = _model(args.checkpoint)
    data, labels = io.load_dataset(args.data)
    codes = model.encode(data).values.numpy()
    probe = _probe_for(args, codes, labels)
    edited = classifier_translate(codes[args.index], probe, args.deltas, args.binarize)
    z = torch.as_tensor(np.stack(edited), dtype=torch.float32)
    g = _generator(seed)
    x_T = torch.randn((1, *model.input_shape), generator=g).expand(len(edited), -1, -1, -1).contiguous()
    images = sample(model.denoiser, model.schedule_for(args.steps),
                    LatentCode(z, "hard" if args.binarize else "continuous"), x_T, g, not args.no_clip_x0)
    print(io.export_images(images, Path(args.out) / "edit.png", nrow=len(edited))[0])


def cmd_fit_map(args):
    seed = _seed(args)
    _log_resolved(args, {"src": args.src, "tgt": args.tgt, "data_src": args.data_src,
                         "data_tgt": args.data_tgt, "depth": args.depth, "epochs": args.epochs}, seed)
    m_src, m_tgt = _model(args.src), _model(args.tgt)
    x_src, _ = io.load_dataset(args.data_src)
    x_tgt, _ = io.load_dataset(args.data_tgt)
    if x_src.shape[0] != x_tgt.shape[0]:
        raise DataError("paired datasets differ in length")
    pairs = (m_src.encode(x_src), m_tgt.encode(x_tgt))
    if args.depth_sweep:
        rows = []
        for d in args.depth_sweep:
            gm = fit_latent_map(pairs, depth=d, epochs=args.epochs, seed=seed % (2 ** 31))
            rows.append({"metric": "val_bce", "value": gm.val_loss, "depth": d, "seed": seed})
        write_metric_report(Path(args.out) / "depth_sweep.tsv", rows)
    gamma = fit_latent_map(pairs, depth=args.depth, epochs=args.epochs, seed=seed % (2 ** 31))
    log.info("map val loss %.4f, bit accuracy %.4f", gamma.val_loss, gamma.val_accuracy)
    save_map(gamma, Path(args.out) / "map.ckpt")
    print(Path(args.out) / "map.ckpt")


def cmd_translate(args):
    seed = _seed(args)
    _log_resolved(args, {"src": args.src, "tgt": args.tgt, "map": args.map, "data": args.data,
                         "targets": args.targets, "count": args.count, "steps": args.steps}, seed)
    m_src, m_tgt = _model(args.src), _model(args.tgt)
    gamma = load_map(args.map)
    x, _ = io.load_dataset(args.data)
    x = x[: args.count]
    x_tgt = io.load_dataset(args.targets)[0][: args.count] if args.targets else None
    out, mse = translate_image(x, m_src, m_tgt, gamma, _generator(seed), args.steps, x_tgt,
                               not args.no_clip_x0)
    side = torch.stack([x, out], 1).flatten(0, 1)
    png, _ = io.export_images(side, Path(args.out) / "translation.png", nrow=2 * min(8, len(x)))
    if mse is not None:
        write_metric_report(Path(args.out) / "translation_report.tsv",
                            [{"metric": "translation_mse", "value": float(mse.mean()),
                              "n": len(x), "seed": seed}])
        log.info("translation mse %.5f", float(mse.mean()))
    print(png)


def cmd_probe(args):
    seed = _seed(args)
    _log_resolved(args, {"codes": args.codes, "data": args.data, "factor": args.factor,
                         "split_seed": args.split_seed}, seed)
    codes = io.load_codes(args.codes).astype(np.float64)
    _, labels = io.load_dataset(args.data)
    if args.factor not in labels:
        raise DataError(f"dataset has no labels for factor {args.factor!r}; have {sorted(labels)}")
    probe, metrics = fit_linear_probe(codes, labels[args.factor], split_seed=args.split_seed)
    out = Path(args.out)
    io.write_report(out / "probe.tsv", probe.to_rows())
    rows = [{"metric": "probe_test_accuracy", "value": metrics["test_accuracy"],
             "std": metrics["test_accuracy_std"], "n": metrics["n_codes"], "seed": args.split_seed}]
    if "test_auroc" in metrics:
        rows.append({"metric": "probe_test_auroc", "value": metrics["test_auroc"],
                     "n": metrics["n_codes"], "seed": args.split_seed})
    write_metric_report(out / "probe_report.tsv", rows)
    print(f"test_accuracy\t{metrics['test_accuracy']:.4f}")


def _sample_set(path) -> np.ndarray:
    p = Path(path)
    files = sorted(p.glob("*.npy")) if p.is_dir() else [p]
    if not files:
        raise DataError(f"no .npy sample dumps in {p}")
    return np.concatenate([np.load(f) for f in files])


def cmd_eval(args):
    seed = _seed(args)
    _log_resolved(args, {"metric": args.metric, "a": args.a, "b": args.b, "checkpoint": args.checkpoint,
                         "data": args.data, "steps": args.steps, "limit": args.limit}, seed)
    g = _generator(seed)
    if args.metric == "frechet_proxy":
        if not (args.a and args.b):
            raise ConfigurationError("frechet_proxy needs --a and --b sample sets")
        a, b = _sample_set(args.a), _sample_set(args.b)
        rows = [{"metric": "frechet_proxy", "value": frechet_proxy(a, b), "n_a": len(a), "n_b": len(b),
                 "seed": seed}]
    else:
        if not (args.checkpoint and args.data):
            raise ConfigurationError(f"{args.metric} needs --checkpoint and --data")
        model = _model(args.checkpoint)
        data, _ = io.load_dataset(args.data)
        data = data[: args.limit]
        if args.metric == "reconstruction_mse":
            value = reconstruction_mse(model, data, args.steps, g, clip_x0=not args.no_clip_x0)
        elif args.metric == "nll_bpd":
            value = model_bpd(model, data, g)
        else:
            stats = latent_usage_stats(model.encode(data))
            value = float(np.min(stats["entropy_bits"]))
        rows = [{"metric": args.metric if args.metric != "latent_usage" else "min_bit_entropy",
                 "value": value, "n": len(data), "seed": seed}]
    write_metric_report(Path(args.out) / "report.tsv", rows)
    for r in rows:
        print(f"{r['metric']}\t{r['value']:.6g}")


# ---------------------------------------------------------------- parser


def _common(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="RNG seed (random and logged when omitted)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--log-level", default="INFO")


def _train_flags(p):
    p.add_argument("--data", required=True, help="dataset (.npz, .npy or PNG directory)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-bits", type=int)
    p.add_argument("--mode", choices=("none", "concat_with_t", "cross_attention"))
    p.add_argument("--T", type=int)
    p.add_argument("--schedule", choices=("linear", "cosine"))
    p.add_argument("--latent-kind", choices=("bernoulli", "normal"))
    p.add_argument("--ema-decay", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitdae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        _common(p)
        p.set_defaults(fn=fn)
        return p

    p = command("gen-data", cmd_gen_data, "render a synthetic shapes dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--style", choices=("mixed", "outline", "filled"))
    p.add_argument("--shapes", type=lambda s: tuple(s.split(",")))
    p.add_argument("--radii", type=lambda s: tuple(float(v) for v in s.split(",")))
    p.add_argument("--labels-from", help="reuse factor labels of another dataset (paired domains)")

    p = command("train", cmd_train, "train a model from scratch")
    _train_flags(p)

    p = command("finetune", cmd_finetune, "add z conditioning to an unconditional checkpoint")
    _train_flags(p)
    p.add_argument("--base", required=True)
    p.add_argument("--finetune-mode", choices=("all_params", "new_params_only"), default="all_params")

    p = command("sample", cmd_sample, "generate images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--z-source", nargs="+", default=["bernoulli"], metavar="SOURCE [PATH]",
                   help="bernoulli | posterior CODES | ar PRIOR | normal PRIOR")
    p.add_argument("--steps", type=int, help="strided chain length (default: full T)")
    p.add_argument("--no-clip-x0", action="store_true", help="do not clamp predicted x0 during sampling")
    p.add_argument("--no-ema", action="store_true")

    p = command("encode", cmd_encode, "write posterior codes of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--no-ema", action="store_true")

    p = command("fit-prior", cmd_fit_prior, "fit a prior over codes")
    p.add_argument("--codes", required=True)
    p.add_argument("--kind", choices=("ar", "normal"), default="ar")
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--epochs", type=int, default=200)

    p = command("interpolate", cmd_interpolate, "bit-flip path between two encoded images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--src-index", type=int, default=0)
    p.add_argument("--tgt-index", type=int, default=1)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-clip-x0", action="store_true", help="do not clamp predicted x0 during sampling")

    p = command("edit", cmd_edit, "move a code across a probe's decision boundary")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--factor", default="fill")
    p.add_argument("--probe", help="probe table written by the probe command")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--deltas", type=float, nargs="+", default=[0.0, -0.5, -1.0, -1.5, -2.0])
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--steps", type=int)
    p.add_argument("--no-clip-x0", action="store_true", help="do not clamp predicted x0 during sampling")

    p = command("fit-map", cmd_fit_map, "fit a code map between two models on paired data")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--data-src", required=True)
    p.add_argument("--data-tgt", required=True)
    p.add_argument("--depth", type=int, default=6)
    p.add_argument("--depth-sweep", type=int, nargs="*")
    p.add_argument("--epochs", type=int, default=300)

    p = command("translate", cmd_translate, "translate images between two models through a code map")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", help="paired target-domain images for MSE")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--steps", type=int)
    p.add_argument("--no-clip-x0", action="store_true", help="do not clamp predicted x0 during sampling")

    p = command("probe", cmd_probe, "linear probe of codes against a label")
    p.add_argument("--codes", required=True)
    p.add_argument("--data", required=True, help="dataset holding the labels")
    p.add_argument("--factor", required=True)
    p.add_argument("--split-seed", type=int, default=0)

    p = command("eval", cmd_eval, "compute a metric")
    p.add_argument("--metric", required=True,
                   choices=("frechet_proxy", "reconstruction_mse", "nll_bpd", "latent_usage"))
    p.add_argument("--a", help="sample dump (.npy) or directory of dumps")
    p.add_argument("--b", help="sample dump (.npy) or directory of dumps")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--steps", type=int)
    p.add_argument("--no-clip-x0", action="store_true", help="do not clamp predicted x0 during sampling")
    p.add_argument("--limit", type=int, default=256)
    return parser


def error_category(exc: BaseException) -> str:
    if isinstance(exc, BitDAEError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (ValueError, TypeError)):
        return "config"
    return "internal"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        args.fn(args)
    except Exception as exc:  # single-line categorized report
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {error_category(exc)}: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
