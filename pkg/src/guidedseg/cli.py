"""Command line entry points: synth, train, eval, bench, serve."""

from __future__ import annotations

import json
import platform
import sys
from pathlib import Path

import click
import numpy as np

from . import episodes as ep
from . import evaluate, model, train
from .checkpoint import load_checkpoint
from .errors import (
    ConfigError,
    ContractError,
    DatasetFormatError,
    DatasetTooSmallError,
    GuidedSegError,
)
from .shapes import ShapesConfig, generate_shapes_world, load_dataset, save_dataset

HEAD_ALIASES = {
    "fusion": model.HEAD_FEATURE_FUSION,
    "regress": model.HEAD_PARAM_REGRESSION,
    "proto": model.HEAD_PROTOTYPE,
}

EXIT_CONFIG = 2
EXIT_DATA = 3


def _fail(code: int, err: Exception) -> None:
    click.echo(f"error: {err}", err=True)
    sys.exit(code)


def _guard(fn):
    try:
        fn()
    except (DatasetFormatError, DatasetTooSmallError, FileNotFoundError) as e:
        _fail(EXIT_DATA, e)
    except (ConfigError, ContractError) as e:
        _fail(EXIT_CONFIG, e)
    except GuidedSegError as e:
        _fail(EXIT_CONFIG, e)


def _load_params(path: str) -> model.ModelParams:
    tensors, meta = load_checkpoint(path)
    return model.ModelParams(params=tensors,
                             config=model.GuidanceConfig.from_dict(meta))


def _parse_points(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok == ep.DENSE:
            out.append(ep.DENSE)
        elif tok.isdigit() and int(tok) > 0:
            out.append(int(tok))
        else:
            raise ConfigError(f"bad point budget {tok!r}")
    return out


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}")


@click.group()
def main():
    """Few-shot segmentation: data synthesis, training, evaluation, serving."""


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
@click.option("--images", default=0, type=int)
@click.option("--video-sequences", default=0, type=int)
def synth(out, seed, images, video_sequences):
    """Generate a shapes-world dataset directory."""
    def run():
        cfg = ShapesConfig()
        samples = generate_shapes_world(cfg, seed=seed, images=images,
                                        video_sequences=video_sequences)
        save_dataset(samples, out)
        click.echo(f"wrote {len(samples)} samples to {out}")
    _guard(run)


@main.command(name="train")
@click.option("--data", required=True, type=click.Path())
@click.option("--mode", default=ep.MODE_SEMANTIC,
              type=click.Choice(list(ep.MODES)))
@click.option("--out", required=True, type=click.Path())
@click.option("--episodes", default=5000, type=int)
@click.option("--fusion", default=model.FUSION_LATE,
              type=click.Choice([model.FUSION_LATE, model.FUSION_EARLY]))
@click.option("--head", default="fusion", type=click.Choice(sorted(HEAD_ALIASES)))
@click.option("--seed", default=0, type=int)
@click.option("--lr", default=0.02, type=float)
@click.option("--momentum", default=0.9, type=float)
@click.option("--weight-decay", default=1e-4, type=float)
@click.option("--s-train", default=1, type=int)
@click.option("--heldout", default="", help="class ids excluded from training")
@click.option("--unguided", is_flag=True,
              help="train the foreground-background baseline instead")
def train_cmd(data, mode, out, episodes, fusion, head, seed, lr, momentum,
              weight_decay, s_train, heldout, unguided):
    """Train a guided model (or the unguided floor) episodically."""
    def run():
        samples = load_dataset(data)
        allowed = None
        if heldout.strip():
            excluded = set(_parse_ints(heldout))
            n_classes = ShapesConfig().num_classes
            allowed = [c for c in range(n_classes) if c not in excluded]
        gcfg = model.GuidanceConfig(fusion=fusion, head=HEAD_ALIASES[head])
        tcfg = train.TrainConfig(mode=mode, guidance=gcfg, episodes=episodes,
                                 s_train=s_train, lr=lr, momentum=momentum,
                                 weight_decay=weight_decay, seed=seed,
                                 allowed_classes=allowed)
        if unguided:
            train.train_fgbg(samples, tcfg, out_path=out, log=click.echo)
        else:
            train.train_guided(samples, tcfg, out_path=out, log=click.echo)
        click.echo(f"wrote checkpoint to {out}")
    _guard(run)


@main.command(name="eval")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--data", required=True, type=click.Path())
@click.option("--mode", default=ep.MODE_SEMANTIC,
              type=click.Choice(list(ep.MODES)))
@click.option("--shots", default="1", help="comma-separated support sizes")
@click.option("--points", default="1,2,5,10,dense",
              help="comma-separated point budgets")
@click.option("--report", required=True, type=click.Path())
@click.option("--episodes-per-cell", default=200, type=int)
@click.option("--seed", default=0, type=int)
@click.option("--classes", default="", help="restrict tasks to these class ids")
@click.option("--require-distractor", is_flag=True)
@click.option("--fgbg-ckpt", default=None, type=click.Path(),
              help="also evaluate this unguided checkpoint as a baseline row")
def eval_cmd(ckpt, data, mode, shots, points, report, episodes_per_cell, seed,
             classes, require_distractor, fgbg_ckpt):
    """Sweep the (S, P) grid and write a JSON report."""
    def run():
        params = _load_params(ckpt)
        samples = load_dataset(data)
        s_list = _parse_ints(shots)
        p_list = _parse_points(points)
        allowed = _parse_ints(classes) if classes.strip() else None
        rep = evaluate.eval_fewshot(params, samples, mode, s_list, p_list,
                                    episodes_per_cell=episodes_per_cell,
                                    seed=seed, allowed_classes=allowed,
                                    require_distractor=require_distractor)
        if fgbg_ckpt:
            base = evaluate.eval_fewshot(
                _load_params(fgbg_ckpt), samples, mode, s_list, p_list,
                episodes_per_cell=episodes_per_cell, seed=seed,
                allowed_classes=allowed, require_distractor=require_distractor)
            rep["baselines"]["fgbg"] = base["cells"]
        for cell in rep["cells"]:
            click.echo(f"S={cell['S']} P={cell['P']}: "
                       f"iu {cell['mean_iu']:.4f} +- {cell['std_iu']:.4f} "
                       f"(n={cell['n']})")
        evaluate.save_report(rep, report)
        click.echo(f"wrote report to {report}")
    _guard(run)


@main.command()
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--data", required=True, type=click.Path())
@click.option("--report", required=True, type=click.Path())
@click.option("--shots", default=2, type=int)
@click.option("--reps", default=20, type=int)
@click.option("--seed", default=0, type=int)
def bench(ckpt, data, report, shots, reps, seed):
    """Time a full forward vs a cached-feature annotation update."""
    def run():
        params = _load_params(ckpt)
        samples = load_dataset(data)
        mode = ep.MODE_VIDEO if any(s.sequence_id is not None
                                    for s in samples) else ep.MODE_SEMANTIC
        episode = ep.sample_episode(samples, mode, shots, 5,
                                    np.random.default_rng(seed))
        out = evaluate.benchmark_timing(params, episode, reps=reps)
        out["hardware"] = {
            "machine": platform.machine(),
            "processor": platform.processor(),
            "python": platform.python_version(),
        }
        out["episode"] = {"mode": mode, "S": shots, "P": 5}
        with open(report, "w") as f:
            json.dump(out, f, indent=2, sort_keys=True)
            f.write("\n")
        if out["ratio"] is None:
            click.echo(f"full forward {out['full_forward_ms']:.2f} ms; "
                       f"no update path for early fusion")
        else:
            click.echo(f"full forward {out['full_forward_ms']:.2f} ms, "
                       f"update {out['guidance_update_ms']:.2f} ms, "
                       f"ratio {out['ratio']:.1f}x")
        click.echo(f"wrote report to {report}")
    _guard(run)


@main.command()
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--addr", default="127.0.0.1:8008")
@click.option("--max-frames", default=64, type=int)
@click.option("--max-sessions", default=256, type=int)
@click.option("--static", default=None, type=click.Path(exists=True),
              help="serve these files at / (the annotator frontend)")
def serve(ckpt, addr, max_frames, max_sessions, static):
    """Run the interactive session service."""
    def run():
        import uvicorn

        from .service import app_from_checkpoint
        host, _, port = addr.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"addr must be host:port, got {addr!r}")
        app = app_from_checkpoint(Path(ckpt), max_frames=max_frames,
                                  max_sessions=max_sessions, static_dir=static)
        uvicorn.run(app, host=host, port=int(port))
    _guard(run)


if __name__ == "__main__":
    main()
