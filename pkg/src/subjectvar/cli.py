"""Command-line entry point wiring all modules together.

Subcommands: gen-data, train-tokenizer, train --phase {a,b}, sample, eval,
bench, selftest. Every run resolves one declarative config (defaults <-
file <- --set overrides), prints its hash, and embeds it in artifacts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_ARTIFACT = 2


def _add_common(p):
    p.add_argument("--config", help="declarative config file (INI sections)")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="section.key=value", help="override a config value")


def build_parser():
    p = argparse.ArgumentParser(prog="subjectvar",
                                description="subject-driven next-scale image generation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic triplet dataset")
    _add_common(g)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train-tokenizer", help="train the image autoencoder + quantizer")
    _add_common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train the generator (phase a: backbone, b: subject paths)")
    _add_common(tr)
    tr.add_argument("--phase", choices=["a", "b"], required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--tokenizer", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--parent", help="phase-A checkpoint (required for phase b)")
    tr.add_argument("--log", help="metrics log path (newline-delimited records)")

    s = sub.add_parser("sample", help="generate images from a prompt (+ optional reference)")
    _add_common(s)
    s.add_argument("--model", required=True)
    s.add_argument("--tokenizer", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--reference", help="white-background reference PNG")
    s.add_argument("--gamma-t", type=float)
    s.add_argument("--gamma-i", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="run the held-out benchmark or CFG sweep")
    _add_common(e)
    e.add_argument("--model", required=True)
    e.add_argument("--tokenizer", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--sweep-gamma-t", help="comma list; with --sweep-gamma-i emits the sweep table")
    e.add_argument("--sweep-gamma-i", help="comma list")

    b = sub.add_parser("bench", help="latency benchmark vs next-token baseline")
    _add_common(b)
    b.add_argument("--model", required=True)
    b.add_argument("--tokenizer", required=True)
    b.add_argument("--out", help="append the machine-readable report here")

    st = sub.add_parser("selftest", help="gradient, leakage, guidance, cache checks")
    _add_common(st)
    return p


def _resolve(args):
    from .config import load_config

    cfg = load_config(getattr(args, "config", None), getattr(args, "overrides", []))
    print(f"config hash: {cfg.hash()}")
    return cfg


def _require(path, what):
    if path is None or not os.path.exists(path):
        raise MissingArtifact(f"missing {what}: {path!r}")
    return path


class MissingArtifact(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    from .data import gen_dataset

    cfg = _resolve(args)
    manifest = gen_dataset(
        cfg.data.n, cfg.data.seed, args.out,
        split=tuple(cfg.data.split), test_identity_frac=cfg.data.test_identity_frac,
    )
    print(f"wrote {manifest['counts']['train']} train / {manifest['counts']['test']} test "
          f"triplets to {args.out}")
    return EXIT_OK


def _load_images(root, split="train", with_refs=True):
    from .data import iter_split

    targets, refs = [], []
    for trip in iter_split(root, split):
        targets.append(trip.target)
        if with_refs:
            refs.append(trip.reference)
    return targets, refs


def cmd_train_tokenizer(args):
    from .checkpoint import save_tokenizer
    from .config import ae_config
    from .tokenizer import ImageTokenizer, train_autoencoder

    cfg = _resolve(args)
    _require(os.path.join(args.data, "manifest.json"), "dataset manifest")
    targets, refs = _load_images(args.data)
    images = np.stack(targets + refs)
    ae, report = train_autoencoder(images, ae_config(cfg),
                                   log_cb=lambda s, l: print(f"  step {s}: mse {l:.5f}"))
    tok = ImageTokenizer.build(ae)
    tok.calibrate(np.stack(targets), shrink=cfg.tokenizer.gain_shrink,
                  max_images=cfg.tokenizer.calib_images)
    h = save_tokenizer(args.out, tok, cfg.resolved(), cfg.hash(), report)
    print(f"holdout mse {report['holdout_mse']:.5f} (target {report['target']}) "
          f"-> {args.out} [{h}]")
    return EXIT_OK


def _prepare_training_set(root, tokenizer, vocab, phase):
    from .conditioning import build_bundle
    from .data import iter_split

    pairs = []
    for trip in iter_split(root, "train"):
        latent = tokenizer.ae.encode_np(trip.target)
        ref = trip.reference if phase == "b" else None
        bundle = build_bundle(trip.prompt, ref, tokenizer, vocab)
        pairs.append((latent, bundle))
    return pairs


def cmd_train(args):
    from .checkpoint import load_model, load_tokenizer, save_model
    from .model import SubjectScaleModel
    from .config import load_config
    from .training import run_training

    cfg = _resolve(args)
    _require(os.path.join(args.data, "manifest.json"), "dataset manifest")
    tok, _ = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    parent_hash = None
    if args.phase == "b":
        if args.parent is None:
            raise MissingArtifact(
                "phase b requires the phase-A parent checkpoint (--parent)")
        parent = _require(args.parent, "phase-A parent checkpoint")
        model, pmanifest, _ = load_model(parent)
        if pmanifest["phase"] not in ("a", "b"):
            raise MissingArtifact(f"{parent}: not a trained phase-A checkpoint")
        from .checkpoint import file_hash

        parent_hash = file_hash(parent)
    else:
        model = SubjectScaleModel(cfg.model)
    if list(model.config.schedule) != [tuple(s) for s in tok.schedule]:
        print("error: model schedule does not match tokenizer schedule", file=sys.stderr)
        return EXIT_ERROR
    dataset = _prepare_training_set(args.data, tok, model.vocab, args.phase)
    state, opt = run_training(model, tok.quantizer, dataset, cfg.train, args.phase,
                              log_path=args.log)
    h = save_model(args.out, model, cfg.resolved(), cfg.hash(), parent_hash=parent_hash,
                   opt=opt, train_state=state)
    print(f"phase {args.phase}: {state.step} steps, final loss "
          f"{state.loss_history[-1]:.4f} -> {args.out} [{h}]")
    return EXIT_OK


def cmd_sample(args):
    from .checkpoint import load_model, load_tokenizer
    from .data import load_png, _to_png
    from .sampling import GuidanceScales, SampleRequest, Sampler

    cfg = _resolve(args)
    model, _, _ = load_model(_require(args.model, "model checkpoint"))
    tok, _ = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    gt = cfg.sample.gamma_t if args.gamma_t is None else args.gamma_t
    gi = cfg.sample.gamma_i if args.gamma_i is None else args.gamma_i
    seed = cfg.sample.seed if args.seed is None else args.seed
    reference = load_png(args.reference) if args.reference else None
    request = SampleRequest(
        prompt=args.prompt, reference=reference, scales=GuidanceScales(gt, gi),
        temperature=cfg.sample.temperature, argmax=cfg.sample.argmax, seed=seed,
        num_images=cfg.sample.num_images,
    )
    sampler = Sampler(model, tok)
    images, records = sampler.generate(request)
    os.makedirs(args.out, exist_ok=True)
    timing = []
    for i, (img, rec) in enumerate(zip(images, records)):
        _to_png(os.path.join(args.out, f"sample_{i:03d}.png"), img)
        timing.append({"image": i, "scale_seconds": rec["scale_seconds"]})
    sidecar = {
        "config_hash": cfg.hash(),
        "prompt": args.prompt,
        "seed": seed,
        "scales": {"gamma_t": gt, "gamma_i": gi},
        "num_images": len(images),
        "forward_passes": records[0]["forward_passes"],
        "branches": records[0]["branches"],
    }
    with open(os.path.join(args.out, "sample.json"), "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)
    with open(os.path.join(args.out, "timing.json"), "w") as f:
        json.dump(timing, f, indent=1)
    print(f"wrote {len(images)} image(s) to {args.out} "
          f"({records[0]['forward_passes']} conditioned forward passes each)")
    return EXIT_OK


def cmd_eval(args):
    from .checkpoint import load_model, load_tokenizer
    from .data import load_manifest
    from .evaluation import EvalProtocol, cfg_sweep, run_benchmark, sweep_table
    from .sampling import GuidanceScales, Sampler

    cfg = _resolve(args)
    model, _, _ = load_model(_require(args.model, "model checkpoint"))
    tok, _ = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    manifest = load_manifest(_require(args.data, "dataset directory"))
    sampler = Sampler(model, tok)
    protocol = EvalProtocol(
        n_subjects=cfg.eval.n_subjects, prompts_per_subject=cfg.eval.prompts_per_subject,
        images_per_pair=cfg.eval.images_per_pair, seed=cfg.eval.seed,
    )
    if args.sweep_gamma_t or args.sweep_gamma_i:
        gts = [float(x) for x in (args.sweep_gamma_t or str(cfg.eval.gamma_t)).split(",")]
        gis = [float(x) for x in (args.sweep_gamma_i or str(cfg.eval.gamma_i)).split(",")]
        rows = cfg_sweep(sampler, manifest, gts, gis, protocol,
                         temperature=cfg.eval.temperature)
        with open(args.out, "w") as f:
            f.write(sweep_table(rows))
        print(f"wrote {len(rows)} sweep rows to {args.out}")
        return EXIT_OK
    report = run_benchmark(
        sampler, manifest, protocol, GuidanceScales(cfg.eval.gamma_t, cfg.eval.gamma_i),
        ablation=cfg.eval.ablation, temperature=cfg.eval.temperature,
    )
    report["config_hash"] = cfg.hash()
    with open(args.out, "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
    print(f"fidelity {report['fidelity_mean']:.4f}  alignment {report['alignment_mean']:.4f} "
          f"({report['n_images']} images) -> {args.out}")
    return EXIT_OK


def cmd_bench(args):
    from .checkpoint import load_model, load_tokenizer
    from .sampling import GuidanceScales, SampleRequest, Sampler

    cfg = _resolve(args)
    model, _, _ = load_model(_require(args.model, "model checkpoint"))
    tok, _ = load_tokenizer(_require(args.tokenizer, "tokenizer checkpoint"))
    sampler = Sampler(model, tok)
    prompt = "a small red solid circle on a blue background ; center ; rotated 0"
    request = SampleRequest(prompt, None, GuidanceScales(cfg.sample.gamma_t, 0.0),
                            seed=cfg.sample.seed)
    report = sampler.bench(request)
    report["config_hash"] = cfg.hash()
    line = json.dumps(report, sort_keys=True)
    if args.out:
        with open(args.out, "a") as f:
            f.write(line + "\n")
    print(f"next-scale {report['wall_clock_per_image_s']*1e3:.1f} ms/image "
          f"({report['forward_passes']} passes) vs next-token "
          f"{report['next_token_wall_clock_s']*1e3:.1f} ms ({report['next_token_passes']} passes): "
          f"speedup {report['speedup']:.1f}x")
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    _resolve(args)
    return EXIT_OK if run_selftest() else EXIT_ERROR


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-tokenizer": cmd_train_tokenizer,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except Exception as e:  # structured nonzero exit per contract
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
