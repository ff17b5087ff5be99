"""Command-line pipeline: corpus generation through training, evaluation,
ablations, and report aggregation.

Each subcommand runs one stage end to end, reads its prerequisites from the
output directory, and writes checkpoints/reports stamped with the config
hash. Exit codes: 0 success, 2 config error, 3 missing prerequisite,
4 training divergence, 1 anything else.
"""

import argparse
import os
import sys

import numpy as np

from . import ablations, checkpoint, corpus, nn, reports
from .config import ConfigError, RunConfig
from .core import evaluate
from .reports import JsonlLogger

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_DIVERGED = 4

ABLATION_KINDS = ("linear", "vit", "random", "expert-mlp", "expert-transformer",
                  "layer-probe", "identity", "cauchy")


class PrerequisiteError(RuntimeError):
    pass


class Workspace:
    """Directory layout of one run: corpus/, checkpoints/, reports/, logs/."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = cfg["run"]["out_dir"]
        self.corpus_dir = os.path.join(self.root, "corpus")
        self.ckpt_dir = os.path.join(self.root, "checkpoints")
        self.report_dir = os.path.join(self.root, "reports")
        self.log_dir = os.path.join(self.root, "logs")
        for d in (self.root, self.corpus_dir, self.ckpt_dir, self.report_dir, self.log_dir):
            os.makedirs(d, exist_ok=True)
        cfg.save(os.path.join(self.root, "config.ini"))

    def ckpt(self, name):
        return os.path.join(self.ckpt_dir, name)

    def require_ckpt(self, name, producer):
        path = self.ckpt(name)
        if not (os.path.exists(path + ".json") and os.path.exists(path + ".bin")):
            raise PrerequisiteError(
                f"missing checkpoint {name!r} under {self.ckpt_dir}; "
                f"run the '{producer}' subcommand first")
        return path

    def require_corpus(self, kind):
        manifest = os.path.join(self.corpus_dir, f"{kind}_manifest.json")
        if not os.path.exists(manifest):
            raise PrerequisiteError(
                f"missing {kind} corpus under {self.corpus_dir}; "
                "run the 'gen-corpus' subcommand first")
        return corpus.read_image_corpus(self.corpus_dir, kind)[0]

    def require_text(self):
        path = os.path.join(self.corpus_dir, "text_tokens.npy")
        if not os.path.exists(path):
            raise PrerequisiteError(
                f"missing text corpus {path}; run the 'gen-corpus' subcommand first")
        return np.load(path)


def _load_codec(cfg, ws, which="codec"):
    producer = "finetune-mae" if which == "codec" else "pretrain-mae"
    arrays, manifest = checkpoint.load_checkpoint(ws.require_ckpt(which, producer))
    codec = cfg.build_codec()
    codec._ensure_built()
    codec.load_state_arrays(arrays)
    return codec, manifest


def _load_backbone(cfg, ws):
    arrays, manifest = checkpoint.load_checkpoint(ws.require_ckpt("backbone", "pretrain-lm"))
    backbone = cfg.build_backbone()
    backbone._ensure_built()
    backbone.load_state_arrays(arrays)
    return backbone, manifest


def _load_restorer(cfg, ws, task):
    codec, codec_man = _load_codec(cfg, ws)
    backbone, bb_man = _load_backbone(cfg, ws)
    arrays, manifest = checkpoint.load_checkpoint(
        ws.require_ckpt(f"task_{task}", "train"))
    restorer = cfg.build_restorer(codec, backbone, task=task)
    restorer._ensure_built()
    checkpoint.load_params(restorer.named_params(), arrays)
    return restorer, {"task": manifest, "codec": codec_man, "backbone": bb_man}


def _eval_images(cfg, ws):
    test = ws.require_corpus("test")
    return test[:cfg["eval"]["n_images"]]


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def cmd_gen_corpus(cfg, ws, args):
    c = cfg["corpus"]
    seed = cfg["run"]["seed"]
    train = corpus.generate_images(c["n_train"], c["image_size"], seed=seed)
    test = corpus.generate_images(c["n_test"], c["image_size"], seed=seed + 1)
    corpus.write_image_corpus(ws.corpus_dir, train, seed, kind="train")
    corpus.write_image_corpus(ws.corpus_dir, test, seed + 1, kind="test")
    tokens = corpus.generate_token_stream(c["text_chars"], seed=seed)
    np.save(os.path.join(ws.corpus_dir, "text_tokens.npy"), tokens.astype(np.uint16))
    print(f"corpus: {c['n_train']} train / {c['n_test']} test images, "
          f"{len(tokens)} text tokens -> {ws.corpus_dir}")
    return EXIT_OK


def cmd_pretrain_mae(cfg, ws, args):
    train = ws.require_corpus("train")
    codec = cfg.build_codec()
    with JsonlLogger(os.path.join(ws.log_dir, "pretrain_mae.jsonl")) as log:
        codec.fit(train, log=log)
    checkpoint.save_checkpoint(ws.ckpt("codec_pretrained"), codec.state_arrays(),
                               config_hash=cfg.hash(), meta={"stage": "pretrain-mae"})
    print(f"codec pretrained: {len(codec.history_)} steps, "
          f"final loss {codec.history_[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_finetune_mae(cfg, ws, args):
    train = ws.require_corpus("train")
    codec, _ = _load_codec(cfg, ws, which="codec_pretrained")
    digest_before = codec.encoder_digest()
    with JsonlLogger(os.path.join(ws.log_dir, "finetune_mae.jsonl")) as log:
        codec.finetune(train, log=log)
    meta = {"stage": "finetune-mae", "encoder_digest": codec.encoder_digest(),
            "encoder_unchanged": codec.encoder_digest() == digest_before}
    checkpoint.save_checkpoint(ws.ckpt("codec"), codec.state_arrays(),
                               config_hash=cfg.hash(), meta=meta)
    print(f"decoder fine-tuned, encoder unchanged: {meta['encoder_unchanged']}")
    return EXIT_OK


def cmd_pretrain_lm(cfg, ws, args):
    text = ws.require_text()
    backbone = cfg.build_backbone()
    with JsonlLogger(os.path.join(ws.log_dir, "pretrain_lm.jsonl")) as log:
        backbone.fit(text, log=log)
    ppl = backbone.perplexity_history_
    meta = {"stage": "pretrain-lm", "init": backbone.init,
            "perplexity_history": [[int(s), float(p)] for s, p in ppl]}
    checkpoint.save_checkpoint(ws.ckpt("backbone"), backbone.state_arrays(),
                               config_hash=cfg.hash(), meta=meta)
    print(f"backbone pretrained: perplexity {ppl[0][1]:.1f} -> {ppl[-1][1]:.1f}")
    return EXIT_OK


def cmd_train(cfg, ws, args):
    task = args.task or cfg["task"]["task"]
    train = ws.require_corpus("train")
    codec, codec_man = _load_codec(cfg, ws)
    backbone, bb_man = _load_backbone(cfg, ws)
    restorer = cfg.build_restorer(codec, backbone, task=task)
    with JsonlLogger(os.path.join(ws.log_dir, f"train_{task}.jsonl")) as log:
        restorer.fit(train, log=log)
    meta = {"stage": "train", "task": task,
            "trainable_params": int(restorer.trainable_param_count()),
            "codec_config_hash": codec_man["config_hash"],
            "backbone_config_hash": bb_man["config_hash"]}
    checkpoint.save_checkpoint(ws.ckpt(f"task_{task}"),
                               checkpoint.params_to_arrays(restorer.named_params()),
                               config_hash=cfg.hash(), meta=meta)
    print(f"task {task!r} trained: final loss {restorer.history_[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_eval(cfg, ws, args):
    task = args.task or cfg["task"]["task"]
    restorer, _ = _load_restorer(cfg, ws, task)
    images = _eval_images(cfg, ws)
    summary, per_image = evaluate(
        restorer, images, compute_misalignment=cfg["eval"]["misalignment"],
        predict_batch=cfg["eval"]["predict_batch"])
    reports.write_summary(os.path.join(ws.report_dir, f"{task}_summary.json"),
                          summary, cfg.hash())
    reports.write_per_image_csv(os.path.join(ws.report_dir, f"{task}_per_image.csv"),
                                per_image, cfg.hash())
    print(reports.format_table([summary]))
    return EXIT_OK


def cmd_ablate(cfg, ws, args):
    kind = args.kind
    task = args.task or cfg["task"]["task"]
    t = cfg["task"]
    common = dict(task=task, epochs=t["epochs"], batch_size=t["batch_size"],
                  lr=t["lr"], warmup=t["warmup"],
                  degradation_seed=t["degradation_seed"], seed=cfg["run"]["seed"])

    if kind == "cauchy":
        result = ablations.cauchy_expectation(10 ** 6)
        reports.write_summary(os.path.join(ws.report_dir, "ablation_cauchy.json"),
                              result, cfg.hash())
        print(f"half-cauchy sample mean over 10 seeds: {result['mean']:.2f} "
              f"(std {result['std']:.2f})")
        return EXIT_OK

    if kind == "identity":
        restorer, _ = _load_restorer(cfg, ws, task)
        metrics = ablations.identity_metrics(restorer.adapters_.w_in.w.data,
                                             restorer.adapters_.w_out.w.data)
        rng = np.random.default_rng((cfg["run"]["seed"], 1717))
        rand = ablations.scaled_identity_metrics(
            rng.standard_normal((metrics.n, metrics.n)))
        result = {"task": task,
                  "trained": {"l_value": metrics.l_value, "d_value": metrics.d_value,
                              "alpha_star": metrics.alpha_star, "n": metrics.n},
                  "random": {"l_value": rand.l_value, "d_value": rand.d_value}}
        reports.write_summary(os.path.join(ws.report_dir,
                                           f"ablation_identity_{task}.json"),
                              result, cfg.hash())
        print(f"trained adapters: L={metrics.l_value:.3e} D={metrics.d_value:.3e} | "
              f"random: L={rand.l_value:.3f} D={rand.d_value:.2f}")
        return EXIT_OK

    train = ws.require_corpus("train")
    images = _eval_images(cfg, ws)
    codec, _ = _load_codec(cfg, ws)

    if kind == "linear":
        model = ablations.LinearFeatureMap(codec, **common)
    elif kind == "vit":
        backbone, _ = _load_backbone(cfg, ws)
        model = ablations.VitLlmModel(codec, backbone, **common)
    elif kind in ("expert-mlp", "expert-transformer"):
        backbone, _ = _load_backbone(cfg, ws)
        reference = cfg.build_restorer(codec, backbone, task=task).trainable_param_count()
        expert_kind = "mlp2" if kind == "expert-mlp" else "transformer1"
        model = ablations.ExpertModel(codec, expert_kind, reference, **common)
    elif kind == "random":
        backbone = cfg.build_backbone(init="random")
        model = cfg.build_restorer(codec, backbone, task=task)
    elif kind == "layer-probe":
        return _cmd_layer_probe(cfg, ws, args, codec, train, images, common)
    else:
        raise ConfigError(f"unknown ablation kind {kind!r}")

    with JsonlLogger(os.path.join(ws.log_dir, f"ablate_{kind}_{task}.jsonl")) as log:
        model.fit(train, log=log)
    summary, per_image = evaluate(model, images,
                                  compute_misalignment=False,
                                  predict_batch=cfg["eval"]["predict_batch"])
    summary["ablation"] = kind
    summary["blockiness"] = ablations.mean_blockiness(
        model.predict(images), codec.patch_size)
    stem = f"ablation_{kind}_{task}"
    reports.write_summary(os.path.join(ws.report_dir, f"{stem}_summary.json"),
                          summary, cfg.hash())
    reports.write_per_image_csv(os.path.join(ws.report_dir, f"{stem}_per_image.csv"),
                                per_image, cfg.hash())
    print(reports.format_table([summary]))
    return EXIT_OK


def _cmd_layer_probe(cfg, ws, args, codec, train, images, common):
    backbone, _ = _load_backbone(cfg, ws)
    indices = [args.layer] if args.layer is not None else list(range(backbone.n_layers))
    rows = []
    for middle, index in ([("layer", i) for i in indices]
                          + [("mlp", -1), ("identity", -2)]):
        probe = ablations.LayerProbe(codec, backbone, middle=middle,
                                     layer_index=max(index, 0), **common)
        probe.fit(train)
        summary, _ = evaluate(probe, images, compute_misalignment=False,
                              predict_batch=cfg["eval"]["predict_batch"])
        rows.append({"middle": middle, "layer": index,
                     "psnr": summary["psnr_lm4lv"], "ssim": summary["ssim_lm4lv"]})
        print(f"probe middle={middle} layer={index}: "
              f"psnr {summary['psnr_lm4lv']:.2f} ssim {summary['ssim_lm4lv']:.3f}")
    task = common["task"]
    reports.write_per_image_csv(
        os.path.join(ws.report_dir, f"layer_probe_{task}_curve.csv"), rows, cfg.hash())
    return EXIT_OK


def cmd_report(cfg, ws, args):
    rows = reports.aggregate_summaries(ws.report_dir)
    if not rows:
        raise PrerequisiteError(
            f"no summaries found under {ws.report_dir}; run the 'eval' subcommand first")
    table = reports.format_table([r for r in rows if "psnr_lm4lv" in r])
    combined = os.path.join(ws.report_dir, "combined_report.txt")
    with open(combined, "w") as f:
        f.write(f"config_hash={cfg.hash()}\n{table}\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain-mae": cmd_pretrain_mae,
    "finetune-mae": cmd_finetune_mae,
    "pretrain-lm": cmd_pretrain_lm,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lm4lv",
        description="Frozen-backbone low-level vision pipeline")
    parser.add_argument("--config", default=None, help="path to a config.ini")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--out", default=None, help="override output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in ("train", "eval", "ablate"):
            p.add_argument("--task", default=None,
                           help="task name (noise, blur, rain, pepper, mask, "
                                "rotate, flip, repeat)")
        if name == "ablate":
            p.add_argument("--kind", required=True, choices=ABLATION_KINDS)
            p.add_argument("--layer", type=int, default=None)
        elif name == "eval":
            p.add_argument("--layer", type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.out is not None:
            cfg["run"]["out_dir"] = args.out
        ws = Workspace(cfg)
        return COMMANDS[args.command](cfg, ws, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except nn.DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except checkpoint.CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
