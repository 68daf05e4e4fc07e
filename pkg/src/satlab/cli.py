"""``satlab`` command line.

Every subcommand reads an optional flat JSON config (``--config``), lets
flags override it, validates the result before any compute, writes all
outputs under ``--out`` and always leaves a ``manifest.json`` there.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric failure.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, data, kernels
from . import evaluation as ev
from . import experiment as ex
from . import tensor as tc
from .attention import ShareConfig, layer_mask_from_spec
from .denoiser import DenoiserWeights, GmmDenoiser, ModelConfig
from .diffusion import NoiseSchedule, ddim_invert, ddim_sample, restyle_from_image, sample_set
from .imageio import read_pnm, write_pgm, write_ppm, write_ppm_unit
from .train import DEFAULT_BATCH_SIZE, DEFAULT_DATASET_SIZE, DEFAULT_EPOCHS, DEFAULT_LR, train, write_loss_csv

COMMANDS = ("train", "generate", "invert", "restyle", "ablate", "eval", "attnmap", "dataset")


class UsageError(Exception):
    """Bad command line or config; maps to exit code 1."""


@dataclasses.dataclass
class RunConfig:
    # schedule
    schedule: str = "cosine"
    T: int = 50
    # sharing
    mode: str = "reference"
    use_adain: bool = True
    lam: float = 1.0
    share_layers: str | None = None
    # denoiser: "network" (weights file) or "gmm" (analytic oracle)
    denoiser: str = "network"
    weights: str | None = None
    # sets
    contents: list | None = None
    seeds: list | None = None
    n: int = 4
    sets: int = 50
    seed: int = 0
    # inversion / restyle input
    image: str | None = None
    ref_content: int = 0
    # training
    dataset_size: int = DEFAULT_DATASET_SIZE
    epochs: int = DEFAULT_EPOCHS
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH_SIZE
    train_seed: int = 0
    init_seed: int = 0
    # attention maps
    probs_step: int | None = None
    layer: int = 0
    head: int = 0
    query: int = 0
    stream: int = 1
    # dumps
    dump_probs: bool = False
    dump_trajectory: bool = False
    threads: int = 1

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    def validate(self, command):
        if self.schedule != "cosine":
            raise UsageError(f"unknown schedule {self.schedule!r} (only 'cosine')")
        if self.T < 1:
            raise UsageError("T must be >= 1")
        if self.mode not in ("none", "reference", "full"):
            raise UsageError(f"mode must be none, reference or full, not {self.mode!r}")
        if not 0.0 < self.lam <= 1.0:
            raise UsageError("lam must lie in (0, 1]")
        if self.denoiser not in ("network", "gmm"):
            raise UsageError("denoiser must be 'network' or 'gmm'")
        if self.threads < 1:
            raise UsageError("threads must be >= 1")
        for name in ("n", "sets", "dataset_size", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.lr < 0:
            raise UsageError("lr must be non-negative")
        for name in ("contents", "seeds"):
            val = getattr(self, name)
            if val is not None and (not isinstance(val, list) or not all(isinstance(v, int) for v in val)):
                raise UsageError(f"{name} must be a list of integers")
        if self.contents is not None and any(not 0 <= c < data.N_CONTENT for c in self.contents):
            raise UsageError(f"content ids must lie in [0, {data.N_CONTENT})")
        if not 0 <= self.ref_content < data.N_CONTENT:
            raise UsageError(f"ref_content must lie in [0, {data.N_CONTENT})")
        if self.contents is not None and self.seeds is not None and len(self.contents) != len(self.seeds):
            raise UsageError("contents and seeds must have the same length")
        needs_model = command in ("generate", "invert", "restyle", "ablate", "eval", "attnmap")
        if needs_model and self.denoiser == "network" and not self.weights:
            raise UsageError(f"{command} needs --weights (or denoiser=gmm)")
        if command in ("invert", "restyle") and not self.image:
            raise UsageError(f"{command} needs --image")
        if command == "attnmap" and self.denoiser != "network":
            raise UsageError("attnmap needs the network denoiser")
        if self.probs_step is not None and not 1 <= self.probs_step <= self.T:
            raise UsageError(f"probs_step must lie in [1, {self.T}]")
        return self


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="satlab", description="Shared self-attention style alignment lab.")
    parser.add_argument("--version", action="version", version=f"satlab {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "train": "train the toy denoiser and write weights.sawt + loss.csv",
        "generate": "generate one set (image 0 is the reference)",
        "invert": "DDIM-invert an image into a trajectory",
        "restyle": "invert an image and generate targets in its style",
        "ablate": "compare none / reference / full sharing on matched seeds",
        "eval": "score many generated sets under one config",
        "attnmap": "attention probability map and PCA image for one query",
        "dataset": "export procedural samples as PPM files plus manifest.csv",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="flat JSON config; flags override its values")
        p.add_argument("--threads", type=int, help="cap on worker threads; the kernels are single-threaded, so "
                       "this only bounds future parallelism and never changes results")
        p.add_argument("--T", type=int, help="number of diffusion steps")
        p.add_argument("--seed", type=int, help="base seed")
        if name in ("generate", "restyle", "ablate", "eval", "attnmap"):
            p.add_argument("--mode", choices=("none", "reference", "full"))
            p.add_argument("--no-adain", dest="use_adain", action="store_false", default=None)
            p.add_argument("--lam", type=float, help="reference logit scale in (0, 1]")
            p.add_argument("--share-layers", help="fraction of leading layers (0.5) or bitmask (1100)")
            p.add_argument("--contents", type=_int_list, help="comma-separated content ids")
            p.add_argument("--seeds", type=_int_list, help="comma-separated noise seeds")
            p.add_argument("--n", type=int, help="set size when contents are not given")
        if name in ("generate", "invert", "restyle", "ablate", "eval", "attnmap"):
            p.add_argument("--weights", help="SAWT weights file")
            p.add_argument("--denoiser", choices=("network", "gmm"))
        if name in ("invert", "restyle"):
            p.add_argument("--image", help="input PPM")
            p.add_argument("--ref-content", type=int, dest="ref_content")
        if name in ("ablate", "eval"):
            p.add_argument("--sets", type=int, help="number of sets")
        if name in ("generate", "attnmap"):
            p.add_argument("--probs-step", type=int, dest="probs_step")
        if name == "generate":
            p.add_argument("--dump-probs", dest="dump_probs", action="store_true", default=None)
        if name in ("invert", "restyle"):
            p.add_argument("--dump-trajectory", dest="dump_trajectory", action="store_true", default=None)
        if name == "attnmap":
            for flag in ("layer", "head", "query", "stream"):
                p.add_argument(f"--{flag}", type=int)
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--batch-size", type=int, dest="batch_size")
            p.add_argument("--dataset-size", type=int, dest="dataset_size")
            p.add_argument("--init-seed", type=int, dest="init_seed")
        if name == "dataset":
            p.add_argument("--dataset-size", type=int, dest="dataset_size")
    return parser


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def resolve_config(args):
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("config must be a JSON object")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "out", "config") and v is not None}
    raw.update(flags)
    try:
        cfg = RunConfig.from_dict(raw)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    return cfg.validate(args.command)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _schedule(cfg):
    return NoiseSchedule.cosine(cfg.T)


def _share_config(cfg, n_layers, mode=None):
    mask = None if cfg.share_layers is None else layer_mask_from_spec(cfg.share_layers, n_layers)
    try:
        return ShareConfig(mode or cfg.mode, cfg.use_adain, cfg.lam, mask).validate(n_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(cfg):
    """``(model, n_layers, weights_hash)`` for the configured denoiser."""
    if cfg.denoiser == "gmm":
        # jittered components keep inverted real images on the prior's support
        spec = data.oracle_gmm()
        blob = tc.dumps(spec.means)
        return GmmDenoiser(spec), GmmDenoiser.n_layers, _git_hash(blob)
    if not os.path.exists(cfg.weights):
        raise UsageError(f"weights file not found: {cfg.weights}")
    weights = DenoiserWeights.load(cfg.weights)
    return weights, weights.config.layers, weights.content_hash()


def _git_hash(blob):
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()


def _set_members(cfg):
    contents = cfg.contents
    if contents is None:
        rng = tc.Rng(cfg.seed, stream=0x5E7)
        contents = [rng.randint(data.N_CONTENT) for _ in range(cfg.n)]
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.seed * 1000 + i for i in range(len(contents))]
    if len(seeds) != len(contents):
        raise UsageError("contents and seeds must have the same length")
    return list(contents), list(seeds)


def _write_set(out, images):
    write_ppm(os.path.join(out, "ref.ppm"), images[0])
    for i, im in enumerate(images[1:], start=1):
        write_ppm(os.path.join(out, f"target_{i}.ppm"), im)


def _write_probs(out, probs, step):
    for layer in sorted(probs):
        for stream, p in enumerate(probs[layer]):
            tc.save(os.path.join(out, f"probs_t{step}_l{layer}_s{stream}.satn"), p)


def _load_image(path):
    try:
        pix = read_pnm(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc
    if pix.shape != (data.SIZE, data.SIZE, 3):
        raise UsageError(f"expected a {data.SIZE}x{data.SIZE} P6 image, got shape {pix.shape}")
    return pix.astype(np.float64) / 255.0 * 2.0 - 1.0


def _manifest(out, command, cfg, weights_hash, extra):
    manifest = {
        "command": command,
        "version": __version__,
        "backend": kernels.BACKEND,
        "config": dataclasses.asdict(cfg),
        "weights_hash": weights_hash,
        **extra,
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands; each returns (weights_hash, extra manifest fields)
# ---------------------------------------------------------------------------


def cmd_train(cfg, out):
    dataset = data.make_dataset(cfg.dataset_size, seed=cfg.seed)
    config = ModelConfig(n_steps=cfg.T)
    start = time.perf_counter()
    weights, losses = train(dataset, epochs=cfg.epochs, lr=cfg.lr, rng=tc.Rng(cfg.train_seed, stream=1),
                            batch_size=cfg.batch_size, config=config, sched=_schedule(cfg),
                            init_seed=cfg.init_seed)
    weights.save(os.path.join(out, "weights.sawt"))
    write_loss_csv(os.path.join(out, "loss.csv"), losses)
    return weights.content_hash(), {"steps": len(losses), "final_loss": losses[-1],
                                    "seconds": time.perf_counter() - start}


def cmd_generate(cfg, out):
    model, n_layers, whash = _load_model(cfg)
    share = _share_config(cfg, n_layers)
    contents, seeds = _set_members(cfg)
    probs_step = cfg.probs_step if cfg.dump_probs else None
    if cfg.dump_probs and probs_step is None:
        probs_step = max(1, cfg.T // 2)
    res = sample_set(model, contents, seeds, _schedule(cfg), share, probs_step=probs_step)
    _write_set(out, res.images)
    ev.write_metrics_csv(os.path.join(out, "metrics.csv"), [ex.score_set(0, res.images, contents).row()])
    if res.probs:
        _write_probs(out, res.probs, res.probs_step)
    return whash, {"contents": contents, "seeds": seeds}


def cmd_invert(cfg, out):
    model, _, whash = _load_model(cfg)
    sched = _schedule(cfg)
    image = _load_image(cfg.image)
    traj = ddim_invert(image, cfg.ref_content, model, sched)
    traj.save(os.path.join(out, "trajectory"))
    # deterministic reconstruction from the inverted noise
    x = traj.at(sched.T)[None]
    recon = ddim_sample(model, x, [cfg.ref_content], sched).images[0]
    write_ppm(os.path.join(out, "recon.ppm"), recon)
    err = float(np.linalg.norm(recon - image) / max(np.linalg.norm(image), 1e-12))
    return whash, {"reconstruction_rel_l2": err}


def cmd_restyle(cfg, out):
    model, n_layers, whash = _load_model(cfg)
    sched = _schedule(cfg)
    image = _load_image(cfg.image)
    targets = cfg.contents if cfg.contents is not None else [
        tc.Rng(cfg.seed, stream=0x5E8).randint(data.N_CONTENT) for _ in range(cfg.n - 1)]
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.seed * 1000 + i for i in range(len(targets))]
    if len(seeds) != len(targets):
        raise UsageError("one seed per target content required")
    images, traj = restyle_from_image(model, image, cfg.ref_content, targets, seeds, sched,
                                      _share_config(cfg, n_layers))
    _write_set(out, images)
    if cfg.dump_trajectory:
        traj.save(os.path.join(out, "trajectory"))
    metrics = ex.score_set(0, images, [cfg.ref_content] + list(targets))
    ev.write_metrics_csv(os.path.join(out, "metrics.csv"), [metrics.row()])
    rate = ev.style_match_rate(images[1:], image)
    return whash, {"targets": list(targets), "seeds": list(seeds), "input_style_match_rate": rate}


def cmd_ablate(cfg, out):
    model, n_layers, whash = _load_model(cfg)
    sched = _schedule(cfg)
    plans = ex.plan_sets(cfg.sets, cfg.n, cfg.seed)
    summary = {}
    with open(os.path.join(out, "comparison.csv"), "w") as fh:
        fh.write("mode,set_id,consistency,mean_content_alignment,style_match_rate\n")
        for mode in ("none", "reference", "full"):
            metrics, images = ex.run_sets(model, sched, _share_config(cfg, n_layers, mode), plans)
            sub = os.path.join(out, mode)
            os.makedirs(sub, exist_ok=True)
            ev.write_metrics_csv(os.path.join(sub, "metrics.csv"), [m.row() for m in metrics])
            _write_set(sub, images[0])
            for m in metrics:
                fh.write(f"{mode},{m.set_id},{m.consistency:.6f},{m.mean_content_alignment:.6f},"
                         f"{m.style_match_rate:.6f}\n")
            summary[mode] = ex.summarize(metrics)
            summary[mode]["_raw"] = [m.consistency for m in metrics]
    wins, losses, p = ex.paired_sign_test(summary["reference"].pop("_raw"), summary["none"].pop("_raw"))
    summary["full"].pop("_raw")
    for mode, vals in summary.items():
        print(f"{mode:9s} " + " ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    print(f"sign test reference > none on consistency: {wins} wins, {losses} losses, p={p:.3g}")
    return whash, {"summary": summary, "sign_test": {"wins": wins, "losses": losses, "p": p}}


def cmd_eval(cfg, out):
    model, n_layers, whash = _load_model(cfg)
    plans = ex.plan_sets(cfg.sets, cfg.n, cfg.seed)
    metrics, _ = ex.run_sets(model, _schedule(cfg), _share_config(cfg, n_layers), plans)
    ev.write_metrics_csv(os.path.join(out, "metrics.csv"), [m.row() for m in metrics])
    summary = ex.summarize(metrics)
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))
    return whash, {"summary": summary}


def cmd_attnmap(cfg, out):
    model, n_layers, whash = _load_model(cfg)
    contents, seeds = _set_members(cfg)
    step = cfg.probs_step if cfg.probs_step is not None else max(1, cfg.T // 2)
    res = sample_set(model, contents, seeds, _schedule(cfg), _share_config(cfg, n_layers), probs_step=step)
    _write_set(out, res.images)
    try:
        prob_map = ev.attention_prob_map(res.probs, cfg.query, cfg.layer, cfg.head, cfg.stream)
        matrix = ev.mean_head_probs(res.probs, cfg.layer, cfg.stream)
    except (IndexError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    write_pgm(os.path.join(out, "attn_map.pgm"), prob_map)
    write_ppm_unit(os.path.join(out, "attn_pca.ppm"), ev.attention_pca_rgb(matrix))
    if cfg.dump_probs:
        _write_probs(out, res.probs, step)
    return whash, {"contents": contents, "seeds": seeds, "probs_step": step}


def cmd_dataset(cfg, out):
    samples = data.make_dataset(cfg.dataset_size, seed=cfg.seed)
    data.export_dataset(samples, out)
    return None, {"count": len(samples)}


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        os.makedirs(args.out, exist_ok=True)
    except UsageError as exc:
        print(f"satlab: usage error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"satlab: cannot create output directory: {exc}", file=sys.stderr)
        return 1
    try:
        whash, extra = HANDLERS[args.command](cfg, args.out)
    except UsageError as exc:
        print(f"satlab: usage error: {exc}", file=sys.stderr)
        _manifest(args.out, args.command, cfg, None, {"status": "usage_error", "error": str(exc)})
        return 1
    except (FloatingPointError, ValueError, OSError) as exc:
        print(f"satlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        _manifest(args.out, args.command, cfg, None, {"status": "failed", "error": str(exc)})
        return 2
    _manifest(args.out, args.command, cfg, whash, {"status": "ok", **extra})
    return 0


if __name__ == "__main__":
    sys.exit(main())
