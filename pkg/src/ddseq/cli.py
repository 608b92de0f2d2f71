"""Command-line entry point.

Subcommands: train, sample, infill, guide, repr, eval. A JSON run config
with sections {vocab, schedule, model, train, sample, guidance, data,
seed} drives training; unknown keys are rejected with their path. Every
run echoes its fully-resolved config into the output directory. Exit
codes: 0 success, 2 usage/config errors, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np

from .checkpoint import _atomic_write, load_denoiser, load_labeler, save_denoiser, save_labeler, save_tensors
from .denoiser import Denoiser, DenoiserConfig
from .evaluate import evaluate
from .fasta import FastaRecord, read_fasta, write_fasta
from .grammar import generate_corpus, parity_grammar, ss3_grammar
from .guidance import (
    GuidanceConfig,
    cfg_sample,
    encode_annotation,
    encode_labels,
    guided_sample,
    train_ssp_classifier,
)
from .process import TokenSequence
from .sampling import InfillTemplate, SampleTrace, SamplerConfig, sample_loop
from .schedule import Stationary, linear_schedule, mixture_constants
from .training import NonFiniteLossError, TrainConfig, train
from .vocab import build_vocab

EXIT_USAGE = 2
EXIT_NUMERIC = 3

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "vocab": {"alphabet": None},
    "schedule": {"T": 500, "kind": "linear", "stationary": "absorbing"},
    "model": {
        "num_layers": 2,
        "num_heads": 4,
        "embed_dim": 64,
        "ffn_dim": 256,
        "max_len": 64,
        "dropout_rate": 0.0,
        "positional_scheme": "rotary",
        "time_conditioning": False,
        "time_slots": 0,
    },
    "train": {
        "stage": "two_stage",
        "mlm_steps": 600,
        "diffusion_steps": 2400,
        "batch_size": 16,
        "learning_rate": 1e-3,
        "grad_clip_norm": 1.0,
        "mlm_mask_ratio": 0.15,
        "weight_decay": 0.01,
        "eval_interval": 500,
    },
    "sample": {
        "steps": 500,
        "temperature": 1.0,
        "strategy": "stochastic",
        "gumbel_perturb": True,
        "unmask_schedule": "linear",
    },
    "guidance": {"mode": "classifier", "eta": 1.0, "cfg_eta": 1.0},
    "data": {
        "grammar": "ss3",
        "n_train": 2000,
        "n_eval": 64,
        "min_len": 24,
        "max_len": 48,
        "corpus_seed": 1,
    },
}


class ConfigError(ValueError):
    pass


def resolve_config(raw: dict) -> dict:
    """Merge user config over the defaults, rejecting unknown keys by path."""
    def merge(default, user, path):
        if not isinstance(user, dict):
            raise ConfigError(f"config section {path or '<root>'} must be an object")
        out = copy.deepcopy(default)
        for key, value in user.items():
            where = f"{path}.{key}" if path else key
            if key not in default:
                raise ConfigError(f"unknown config key: {where}")
            if isinstance(default[key], dict):
                out[key] = merge(default[key], value, where)
            else:
                out[key] = value
        return out

    return merge(DEFAULT_CONFIG, raw, "")


def load_config(path: str | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    with open(path, "r", encoding="utf-8") as fh:
        return resolve_config(json.load(fh))


def build_grammar(cfg: dict, vocab):
    data = cfg["data"]
    factory = {"ss3": ss3_grammar, "parity": parity_grammar}.get(data["grammar"])
    if factory is None:
        raise ConfigError(f"unknown grammar {data['grammar']!r}")
    return factory(vocab, min_len=data["min_len"], max_len=data["max_len"])


def build_schedule(cfg: dict, vocab):
    sched = cfg["schedule"]
    if sched["kind"] != "linear":
        raise ConfigError(f"unknown schedule kind {sched['kind']!r}")
    stationary = Stationary(sched["stationary"])
    return linear_schedule(int(sched["T"]), stationary, vocab)


def _write_json(path: str, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True).encode())


def _sampler_config(cfg: dict, args) -> SamplerConfig:
    s = cfg["sample"]
    return SamplerConfig(
        steps=args.steps if args.steps is not None else int(s["steps"]),
        temperature=args.temperature if args.temperature is not None else float(s["temperature"]),
        strategy="greedy" if args.greedy else s["strategy"],
        gumbel_perturb=False if (args.no_gumbel or args.greedy) else bool(s["gumbel_perturb"]),
        unmask_schedule=s["unmask_schedule"],
        seed=args.seed,
    )


def _load_model(path: str):
    model, cfg, opt_state = load_denoiser(path)
    run = cfg.get("run", copy.deepcopy(DEFAULT_CONFIG))
    return model, cfg, run, opt_state


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    _write_json(os.path.join(args.out, "config.json"), cfg)
    vocab = build_vocab(cfg["vocab"]["alphabet"])
    schedule = build_schedule(cfg, vocab)
    grammar = build_grammar(cfg, vocab)
    corpus = [s for s, _ in generate_corpus(grammar, int(cfg["data"]["n_train"]), int(cfg["data"]["corpus_seed"]))]
    held = [s for s, _ in generate_corpus(grammar, int(cfg["data"]["n_eval"]), int(cfg["data"]["corpus_seed"]) + 1)]

    tc_kw = dict(cfg["train"])
    if args.steps is not None:  # override total diffusion steps for quick runs
        tc_kw["diffusion_steps"] = args.steps
        if tc_kw["stage"] == "two_stage" and args.steps == 0:
            tc_kw["mlm_steps"] = 0
    tcfg = TrainConfig(seed=int(cfg["seed"]), **tc_kw)

    start_step = 0
    optimizer = None
    if args.resume:
        model, ck_cfg, _run, opt_state = _load_model(args.resume)
        start_step = int(ck_cfg.get("step", 0))
        if opt_state is not None:
            from .nn import AdamW

            total = sum(n for _, n in tcfg.stage_plan())
            optimizer = AdamW(model.store, lr=tcfg.learning_rate, weight_decay=tcfg.weight_decay,
                              warmup_steps=max(1, total // 100))
            optimizer.step_count = opt_state[0]
            for n, arr in opt_state[1].items():
                optimizer.m[n][...] = arr
            for n, arr in opt_state[2].items():
                optimizer.v[n][...] = arr
    else:
        mcfg = DenoiserConfig(**cfg["model"])
        model = Denoiser(mcfg, vocab, seed=int(cfg["seed"]))

    metrics_path = os.path.join(args.out, "metrics.jsonl")
    log_fh = open(metrics_path, "a", encoding="utf-8")
    save_every = args.save_every if args.save_every is not None else int(cfg["train"]["eval_interval"])

    def log_fn(record):
        log_fh.write(json.dumps(record, sort_keys=True) + "\n")
        log_fh.flush()
        if save_every and record["step"] % save_every == 0:
            save_denoiser(os.path.join(args.out, f"checkpoint-{record['step']}"), model,
                          extra_config={"run": cfg}, step=record["step"])

    try:
        _, metrics = train(corpus, tcfg, model, schedule, eval_seqs=held, log_fn=log_fn,
                           start_step=start_step, optimizer=optimizer)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        log_fh.close()
    final_step = metrics[-1]["step"] if metrics else start_step
    save_denoiser(os.path.join(args.out, "checkpoint"), model, extra_config={"run": cfg}, step=final_step)
    print(f"trained to step {final_step}; checkpoint at {os.path.join(args.out, 'checkpoint')}")
    return 0


def _emit_samples(model, templates, cond, sampler, out_path, run_cfg, names=None, annotations=None):
    traces = []
    records = []
    for i, tpl in enumerate(templates):
        import dataclasses

        cfg_i = dataclasses.replace(sampler, seed=sampler.seed + i)
        trace = SampleTrace()
        seq = sample_loop(tpl, model, cfg_i, cond=cond, trace=trace)
        traces.append(trace)
        name = names[i] if names else f"sample_{i}"
        ann = annotations[i] if annotations else None
        records.append(FastaRecord(name=name, seq=seq, annotation=ann))
    write_fasta(records, out_path, model.vocab)
    sidecar = {
        "seed": sampler.seed,
        "config": {
            "steps": sampler.steps,
            "temperature": sampler.temperature,
            "strategy": sampler.strategy,
            "gumbel_perturb": sampler.gumbel_perturb,
            "unmask_schedule": sampler.unmask_schedule,
        },
        "committed_per_step": [t.committed_per_step for t in traces],
    }
    _write_json(out_path + ".json", sidecar)
    return records


def cmd_sample(args) -> int:
    model, _, run, _ = _load_model(args.checkpoint)
    if args.length > model.config.max_len:
        print(f"error: length {args.length} > model max_len {model.config.max_len}", file=sys.stderr)
        return EXIT_USAGE
    sampler = _sampler_config(run, args)
    templates = [InfillTemplate.all_free(args.length, model.vocab)] * args.num
    _emit_samples(model, templates, None, sampler, args.out, run)
    print(f"wrote {args.num} samples of length {args.length} to {args.out}")
    return 0


def cmd_infill(args) -> int:
    model, _, run, _ = _load_model(args.checkpoint)
    records = read_fasta(args.template, model.vocab, on_unknown="reject")
    templates = []
    for rec in records:
        if not np.any(rec.seq.ids == model.vocab.mask_id):
            print(f"error: template {rec.name!r} has no X positions", file=sys.stderr)
            return EXIT_USAGE
        ids = rec.seq.ids
        templates.append(InfillTemplate(ids=ids, observed=ids != model.vocab.mask_id))
    templates = templates * args.num
    names = [f"{rec.name}_fill_{i}" for i in range(args.num) for rec in records]
    sampler = _sampler_config(run, args)
    _emit_samples(model, templates, None, sampler, args.out, run, names=names)
    print(f"wrote {len(templates)} infills to {args.out}")
    return 0


def cmd_guide(args) -> int:
    model, _, run, _ = _load_model(args.checkpoint)
    vocab = model.vocab
    grammar = build_grammar(run, vocab)
    y = encode_annotation(args.labels, grammar.labels)
    L = len(y)
    if L > model.config.max_len:
        print(f"error: labels length {L} > model max_len", file=sys.stderr)
        return EXIT_USAGE
    sampler = _sampler_config(run, args)
    records = []
    import dataclasses

    if args.cfg_eta is not None:
        if model.adapter is None:
            print("error: --cfg-eta needs an adapter-conditioned checkpoint", file=sys.stderr)
            return EXIT_USAGE
        cond = encode_labels(y, grammar.num_classes())
        for i in range(args.num):
            cfg_i = dataclasses.replace(sampler, seed=sampler.seed + i)
            seq = cfg_sample(L, model, cond, cfg_i, cfg_eta=args.cfg_eta)
            records.append(FastaRecord(f"cfg_{i}", seq, annotation=grammar.annotation_str(seq)))
    else:
        gm, _ = load_labeler(args.classifier)
        gcfg = GuidanceConfig(mode="classifier", eta=args.eta)
        for i in range(args.num):
            cfg_i = dataclasses.replace(sampler, seed=sampler.seed + i)
            seq = guided_sample(L, model, gm, y, cfg_i, gcfg)
            records.append(FastaRecord(f"guided_{i}", seq, annotation=grammar.annotation_str(seq)))
    write_fasta(records, args.out, vocab)
    match = float(np.mean([(grammar.annotate(r.seq) == y).mean() for r in records]))
    report = {"labels": args.labels, "eta": args.eta, "cfg_eta": args.cfg_eta,
              "num": args.num, "annotation_match_rate": match}
    _write_json(args.out + ".report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_repr(args) -> int:
    model, _, _, _ = _load_model(args.checkpoint)
    records = read_fasta(args.fasta, model.vocab, on_unknown="reject")
    for rec in records:
        if np.any(rec.seq.ids == model.vocab.mask_id):
            print(f"error: record {rec.name!r} contains mask characters", file=sys.stderr)
            return EXIT_USAGE
    tensors = {}
    names = []
    for i, rec in enumerate(records):
        h = model.embed(rec.seq)
        tensors[f"rec{i:05d}"] = h
        names.append(rec.name)
    save_tensors(args.out, tensors, {"kind": "repr", "records": names, "dim": model.config.embed_dim})
    print(f"wrote {len(records)} embedding matrices to {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, _, run, _ = _load_model(args.checkpoint)
    grammar = build_grammar(run, model.vocab)
    if args.samples:
        records = read_fasta(args.samples, model.vocab, on_unknown="reject")
        samples = [r.seq for r in records]
    else:
        sampler = SamplerConfig(
            steps=int(run["sample"]["steps"]), seed=args.seed,
            temperature=float(run["sample"]["temperature"]),
        )
        import dataclasses

        samples = []
        for i in range(args.self_sample):
            cfg_i = dataclasses.replace(sampler, seed=sampler.seed + i)
            samples.append(sample_loop(InfillTemplate.all_free(args.length, model.vocab), model, cfg_i))
    report = evaluate(samples, grammar=grammar, model=model)
    out = report.to_json()
    if args.out:
        _atomic_write(args.out, out.encode())
    print(out)
    return 0


def cmd_train_classifier(args) -> int:
    cfg = load_config(args.config)
    vocab = build_vocab(cfg["vocab"]["alphabet"])
    schedule = build_schedule(cfg, vocab)
    grammar = build_grammar(cfg, vocab)
    pairs = generate_corpus(grammar, int(cfg["data"]["n_train"]), int(cfg["data"]["corpus_seed"]))
    gm = train_ssp_classifier(
        pairs, noise_aware=not args.clean, schedule=schedule, vocab=vocab,
        num_classes=grammar.num_classes(), steps=args.steps, seed=int(cfg["seed"]),
    )
    save_labeler(args.out, gm, extra_config={"noise_aware": not args.clean})
    print(f"labeler saved to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddseq", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a denoiser on the bundled grammar corpus")
    t.add_argument("--config", default=None, help="JSON run config (defaults used if omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None, help="override diffusion step count")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--save-every", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    def sampling_flags(q):
        q.add_argument("--steps", type=int, default=None)
        q.add_argument("--temperature", type=float, default=None)
        q.add_argument("--greedy", action="store_true")
        q.add_argument("--no-gumbel", action="store_true")
        q.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="unconditional generation to FASTA")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--length", type=int, required=True)
    s.add_argument("--num", type=int, default=1)
    sampling_flags(s)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    f = sub.add_parser("infill", help="fill X positions of FASTA templates")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--template", required=True, help="FASTA with X at free positions")
    f.add_argument("--num", type=int, default=1)
    sampling_flags(f)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_infill)

    g = sub.add_parser("guide", help="guided generation toward per-position labels")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--classifier", default=None)
    g.add_argument("--labels", required=True)
    g.add_argument("--eta", type=float, default=1.0)
    g.add_argument("--cfg-eta", dest="cfg_eta", type=float, default=None)
    g.add_argument("--num", type=int, default=8)
    sampling_flags(g)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_guide)

    r = sub.add_parser("repr", help="export per-sequence embedding matrices")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--fasta", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_repr)

    e = sub.add_parser("eval", help="sequence-space evaluation report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--samples", default=None, help="FASTA of samples to score")
    e.add_argument("--self-sample", type=int, default=0)
    e.add_argument("--length", type=int, default=36)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("train-classifier", help="train the guidance labeler on grammar labels")
    c.add_argument("--config", default=None)
    c.add_argument("--steps", type=int, default=2000)
    c.add_argument("--clean", action="store_true", help="train on clean inputs instead of noise-aware")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_train_classifier)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
