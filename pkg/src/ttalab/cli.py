"""Command-line front end: precompute / run / ablate / ood / report.

Every run is driven by a strict JSON config (unknown keys are errors, every
hyperparameter is a named key) plus repeatable --set dotted overrides. A
(config digest, master seed) pair determines every output byte except the
wall-clock fields recorded under explicit timing keys.

Exit codes: 0 ok, 2 configuration error, 3 artifact digest error,
4 episode failure fraction exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import multiprocessing
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, metrics, ood as oodmod
from .artifacts import canonical_json, read_json, write_json
from .genmodel import ToyLM
from .metrics import aggregate_run, fluency, perplexity, summary_table
from .optim import UpdateRuleConfig
from .precond import (
    DigestMismatchError,
    Preconditioner,
    build_preconditioner,
    estimate_diag_fisher,
)
from .safebank import SafeBank
from .scoring import BiasMonitor, LexiconScorer, MaskedTypeRouter, load_lexicon, report_score
from .tta import EpisodeConfig, load_episodes, run_episode, save_episodes, trigger_curve

MANIFEST_KIND = "run-manifest"
MANIFEST_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIGEST = 3
EXIT_FAILURES = 4

MODES = ("static", "precond", "sgd", "adamw")
ABLATE_AXES = ("epsilon", "segments", "seg_tokens", "multi_trigger", "update_kind")


class CliError(RuntimeError):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -- strict config handling ---------------------------------------------------------

REQUIRED = object()

PRECOMPUTE_SCHEMA = {
    "model": (str, REQUIRED),
    "corpus": (str, REQUIRED),
    "output": (str, REQUIRED),
    "n_steps": (int, 10),
    "batch_size": (int, 2),
    "damping": (float, 1e-4),
    "continuation_tokens": (int, 128),
    "seed": (int, 0),
    "empirical": (bool, False),
}

RUN_SCHEMA = {
    "model": (str, REQUIRED),
    "bank": (str, REQUIRED),
    "evaluator": (str, REQUIRED),
    "preconditioner": (str, None),
    "mode": (str, "precond"),
    "label": (str, None),
    "master_seed": (int, 0),
    "output_dir": (str, REQUIRED),
    "failure_fraction_max": (float, 0.0),
    "lexicons": {
        "trigger": (list, REQUIRED),
        "report": (list, REQUIRED),
        "cue": (dict, REQUIRED),
    },
    "prompts": {
        "path": (str, REQUIRED),
        "min_bias": (float, 0.4),
        "sample": (int, None),
        "seed": (int, 0),
    },
    "episode": {
        "k_segments": (int, 4),
        "tokens_per_segment": (int, 128),
        "epsilon": (float, 0.3),
        "safe_batch": (int, 2),
        "multi_trigger": (bool, False),
        "marker": (str, "[Continue the story]"),
        "temperature": (float, 0.9),
        "top_p": (float, 0.9),
        "separator": (str, "<sep>"),
        "max_len_update": (int, 256),
    },
    "update": {
        "steps": (int, 10),
        "learning_rate": (float, None),
        "clip_coef": (float, 1.0),
        "max_delta_norm": (float, 0.25),
        "lambda_reg": (float, 1e-3),
        "precond_max": (int, 384),
        "flush_every": (int, 1),
    },
}

OOD_SCHEMA = {
    "model": (str, None),
    "background_model": (str, None),
    "reference": {"texts": (str, None), "embeddings": (str, None)},
    "id": {"texts": (str, None), "embeddings": (str, None)},
    "ood": {"texts": (str, None), "embeddings": (str, None)},
    "detectors": (list, ["knn", "mahalanobis"]),
    "k": (int, 10),
    "bootstrap": (int, 1000),
    "seed": (int, 0),
    "output_dir": (str, REQUIRED),
}


def _apply_schema(raw: dict, schema: dict, path: str = "") -> dict:
    if not isinstance(raw, dict):
        raise CliError(EXIT_CONFIG, f"config section {path or '<root>'} must be an object")
    out = {}
    for key, value in raw.items():
        if key not in schema:
            raise CliError(EXIT_CONFIG, f"unknown config key {path + key!r}")
    for key, spec in schema.items():
        sub_path = f"{path}{key}."
        if isinstance(spec, dict):
            out[key] = _apply_schema(raw.get(key, {}), spec, sub_path)
            continue
        typ, default = spec
        if key in raw:
            value = raw[key]
        elif default is REQUIRED:
            raise CliError(EXIT_CONFIG, f"missing required config key {path + key!r}")
        else:
            value = default
        if value is not None:
            if typ is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if typ in (int, float) and isinstance(value, bool):
                raise CliError(EXIT_CONFIG, f"config key {path + key!r} must be {typ.__name__}")
            if not isinstance(value, typ):
                raise CliError(EXIT_CONFIG,
                               f"config key {path + key!r} must be {typ.__name__}, "
                               f"got {type(value).__name__}")
        out[key] = value
    return out


def _parse_set(expr: str):
    if "=" not in expr:
        raise CliError(EXIT_CONFIG, f"--set needs key=value, got {expr!r}")
    key, _, raw = expr.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path, schema: dict, overrides=()) -> dict:
    try:
        raw = read_json(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config file {path} is not valid JSON: {exc}")
    for expr in overrides:
        key, value = _parse_set(expr)
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise CliError(EXIT_CONFIG, f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = value
    cfg = _apply_schema(raw, schema)
    cfg["_base_dir"] = str(Path(path).resolve().parent)
    return cfg


def _resolve(cfg: dict, key_path: str, must_exist: bool = True) -> Path:
    node = cfg
    for part in key_path.split("."):
        node = node[part]
    p = Path(node)
    if not p.is_absolute():
        p = Path(cfg["_base_dir"]) / p
    if must_exist and not p.exists():
        raise CliError(EXIT_CONFIG, f"config key {key_path!r}: no such file: {p}")
    return p


def config_digest(cfg: dict) -> str:
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return hashlib.sha256(canonical_json(clean).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- precompute --------------------------------------------------------------------


def cmd_precompute(args) -> int:
    cfg = load_config(args.config, PRECOMPUTE_SCHEMA, args.set or ())
    model = ToyLM.load(_resolve(cfg, "model"))
    corpus_path = _resolve(cfg, "corpus")
    corpus = [ln for ln in corpus_path.read_text().splitlines() if ln.strip()]
    if not corpus:
        raise CliError(EXIT_CONFIG, f"corpus file {corpus_path} is empty")

    estimate = estimate_diag_fisher(
        model, corpus, n_steps=cfg["n_steps"], batch_size=cfg["batch_size"],
        seed=cfg["seed"], continuation_tokens=cfg["continuation_tokens"],
        empirical=cfg["empirical"])
    pre = build_preconditioner(estimate, damping=cfg["damping"])

    out = _resolve(cfg, "output", must_exist=False)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.verify and out.exists():
        before = file_digest(out)
        tmp = out.with_suffix(out.suffix + ".verify")
        pre.save(tmp)
        after = file_digest(tmp)
        tmp.unlink()
        if before != after:
            raise CliError(EXIT_DIGEST,
                           f"{out}: existing artifact does not match recomputation")
        print(f"verified {out}")
    else:
        pre.save(out)
        print(f"wrote {out}")
    print(f"damping={cfg['damping']:g} n_steps={cfg['n_steps']} "
          f"batch_size={cfg['batch_size']} samples={estimate.sample_count}")
    return EXIT_OK


# -- run ---------------------------------------------------------------------------


def _load_scorers(cfg: dict):
    trig_paths = [Path(cfg["_base_dir"]) / p if not Path(p).is_absolute() else Path(p)
                  for p in cfg["lexicons"]["trigger"]]
    rep_paths = [Path(cfg["_base_dir"]) / p if not Path(p).is_absolute() else Path(p)
                 for p in cfg["lexicons"]["report"]]
    cue_paths = {t: Path(cfg["_base_dir"]) / p if not Path(p).is_absolute() else Path(p)
                 for t, p in cfg["lexicons"]["cue"].items()}
    for group in (*trig_paths, *rep_paths, *cue_paths.values()):
        if not group.exists():
            raise CliError(EXIT_CONFIG, f"lexicon file not found: {group}")
    trigger = [load_lexicon(p, scorer_id=p.stem, role="trigger") for p in trig_paths]
    report = [load_lexicon(p, scorer_id=p.stem, role="report") for p in rep_paths]
    cues = {t: load_lexicon(p, scorer_id=f"cue-{t}", role="routing")
            for t, p in cue_paths.items()}
    return trigger, report, cues


def _select_prompts(cfg: dict, report_scorers) -> list[str]:
    path = _resolve(cfg, "prompts.path")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    floor = cfg["prompts"]["min_bias"]
    kept = [ln for ln in lines if report_score(ln, report_scorers) >= floor]
    n = cfg["prompts"]["sample"]
    if n is None:
        return kept
    if len(kept) < n:
        raise CliError(EXIT_CONFIG,
                       f"prompt file {path}: only {len(kept)} prompts pass the "
                       f"bias floor {floor}, need {n}")
    rng = np.random.default_rng(cfg["prompts"]["seed"])
    idx = rng.permutation(len(kept))[:n]
    return [kept[i] for i in sorted(int(i) for i in idx)]


def _episode_config(cfg: dict) -> EpisodeConfig:
    mode = cfg["mode"]
    if mode not in MODES:
        raise CliError(EXIT_CONFIG, f"mode must be one of {MODES}, got {mode!r}")
    upd = dict(cfg["update"])
    lr = upd.pop("learning_rate")
    update = UpdateRuleConfig(kind=mode if mode != "static" else "precond",
                              learning_rate=lr, **upd)
    return EpisodeConfig(update=update, adapt=(mode != "static"), **cfg["episode"])


# worker state for --jobs parallelism; episodes are independent given the
# per-prompt seed sequence, so the reduction is a plain index sort
_WORKER = {}


def _worker_init(payload):
    _WORKER.update(payload)
    _WORKER["model"] = ToyLM.load(payload["model_path"])
    _WORKER["bank"] = SafeBank.load(payload["bank_path"])
    trigger = [LexiconScorer(s["id"], s["terms"], role="trigger")
               for s in payload["trigger_specs"]]
    cues = {t: LexiconScorer(f"cue-{t}", terms, role="routing")
            for t, terms in payload["cue_specs"].items()}
    _WORKER["monitor"] = BiasMonitor(trigger, MaskedTypeRouter(cues),
                                     epsilon=payload["epsilon"])
    _WORKER["preconditioner"] = (
        Preconditioner.load(payload["pre_path"]) if payload["pre_path"] else None)
    _WORKER["config"] = EpisodeConfig(**payload["episode_kwargs"])


def _run_one(item):
    idx, prompt = item
    rng = np.random.default_rng([_WORKER["master_seed"], idx])
    try:
        rec = run_episode(prompt, _WORKER["model"], _WORKER["monitor"],
                          _WORKER["bank"], _WORKER["preconditioner"],
                          _WORKER["config"], rng, prompt_id=f"prompt-{idx:04d}")
        return idx, rec.to_record(), None
    except Exception as exc:  # hard failure: recorded, the run continues
        return idx, None, f"{type(exc).__name__}: {exc}"


def _scorer_spec(scorer: LexiconScorer) -> dict:
    return {"id": scorer.id,
            "terms": {" ".join(words): w for words, w in scorer.terms.items()}}


def cmd_run(args) -> int:
    cfg = load_config(args.config, RUN_SCHEMA, args.set or ())
    started = time.time()

    model_path = _resolve(cfg, "model")
    bank_path = _resolve(cfg, "bank")
    evaluator_path = _resolve(cfg, "evaluator")
    model = ToyLM.load(model_path)
    evaluator = ToyLM.load(evaluator_path)
    trigger, report_scorers, cues = _load_scorers(cfg)

    episode_cfg = _episode_config(cfg)
    try:
        episode_cfg.validate()
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"invalid episode config: {exc}")

    pre_path = None
    if cfg["mode"] == "precond":
        if cfg["preconditioner"] is None:
            raise CliError(EXIT_CONFIG, "mode=precond needs a preconditioner path")
        pre_path = _resolve(cfg, "preconditioner")
        try:
            Preconditioner.load(pre_path, model=model)
        except DigestMismatchError as exc:
            raise CliError(EXIT_DIGEST, str(exc))

    prompts = _select_prompts(cfg, report_scorers)
    if not prompts:
        raise CliError(EXIT_CONFIG, "no prompts pass the bias floor")

    payload = {
        "model_path": str(model_path),
        "bank_path": str(bank_path),
        "pre_path": str(pre_path) if pre_path else None,
        "trigger_specs": [_scorer_spec(s) for s in trigger],
        "cue_specs": {t: _scorer_spec(s)["terms"] for t, s in cues.items()},
        "epsilon": cfg["episode"]["epsilon"],
        "episode_kwargs": dict(update=episode_cfg.update,
                               adapt=episode_cfg.adapt, **cfg["episode"]),
        "master_seed": cfg["master_seed"],
    }

    items = list(enumerate(prompts))
    if args.jobs and args.jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(args.jobs, initializer=_worker_init,
                      initargs=(payload,)) as pool:
            results = pool.map(_run_one, items)
    else:
        _worker_init(payload)
        results = [_run_one(item) for item in items]
    results.sort(key=lambda r: r[0])

    records = []
    failures = []
    for idx, rec, err in results:
        if err is None:
            records.append(rec)
        else:
            failures.append({"prompt_id": f"prompt-{idx:04d}", "error": err})

    out_dir = _resolve(cfg, "output_dir", must_exist=False)
    out_dir.mkdir(parents=True, exist_ok=True)
    label = cfg["label"] or cfg["mode"]
    digest = config_digest(cfg)

    episode_rows = []
    for rec in records:
        text = " ".join(s["text"] for s in rec["segments"])
        scores = [s["trigger_score"] for s in rec["segments"]
                  if s["trigger_score"] is not None]
        ppl = perplexity(text, evaluator)
        episode_rows.append({
            "prompt_id": rec["prompt_id"],
            "ppl": ppl,
            "fluency": fluency(ppl),
            "bias_mean": float(np.mean(scores)) if scores else float("nan"),
            "trigger_rate": rec["trigger_rate"],
            "timing": rec["timing"],
        })

    meta = {"label": label, "mode": cfg["mode"], "config_digest": digest,
            "master_seed": cfg["master_seed"], "tool_version": __version__}
    from .tta import EpisodeRecord
    save_episodes(out_dir / "records.jsonl",
                  [EpisodeRecord.from_record(r) for r in records], meta=meta)
    write_json(out_dir / "metrics.json", {"kind": "episode-metrics",
                                           "rows": episode_rows, **meta})
    if records:
        summary = aggregate_run(episode_rows)
        table = summary_table({label: summary})
        (out_dir / "summary.tsv").write_text(f"# config {digest}\n" + table)

    manifest = {
        "kind": MANIFEST_KIND,
        "format_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "label": label,
        "mode": cfg["mode"],
        "config_digest": digest,
        "master_seed": cfg["master_seed"],
        "artifacts": {
            "model": {"path": str(model_path), "digest": file_digest(model_path)},
            "bank": {"path": str(bank_path), "digest": file_digest(bank_path)},
            "preconditioner": ({"path": str(pre_path), "digest": file_digest(pre_path)}
                               if pre_path else None),
        },
        "n_prompts": len(prompts),
        "n_episodes": len(records),
        "failures": failures,
        "outputs": {"records": "records.jsonl", "metrics": "metrics.json",
                    "summary": "summary.tsv"},
        "wall_clock_seconds": time.time() - started,
    }
    write_json(out_dir / "manifest.json", manifest)

    frac = len(failures) / len(prompts)
    print(f"{label}: {len(records)} episodes, {len(failures)} failures -> {out_dir}")
    if frac > cfg["failure_fraction_max"]:
        print(f"failure fraction {frac:.3f} exceeds bound "
              f"{cfg['failure_fraction_max']:.3f}", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def load_manifest(path) -> dict:
    d = read_json(path)
    if d.get("kind") != MANIFEST_KIND:
        raise CliError(EXIT_CONFIG, f"{path}: not a run manifest")
    if d.get("format_version") != MANIFEST_VERSION:
        raise CliError(EXIT_CONFIG, f"{path}: unsupported manifest version")
    for name, entry in d["artifacts"].items():
        if entry is None:
            continue
        p = Path(entry["path"])
        if p.exists() and file_digest(p) != entry["digest"]:
            raise CliError(EXIT_DIGEST,
                           f"{path}: artifact {name} at {p} changed since the run")
    return d


# -- ablate ------------------------------------------------------------------------


def _parse_axis_values(axis: str, raw: str):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise CliError(EXIT_CONFIG, "--values must be a non-empty comma list")
    try:
        if axis == "epsilon":
            return [float(p) for p in parts]
        if axis in ("segments", "seg_tokens"):
            return [int(p) for p in parts]
        if axis == "multi_trigger":
            if any(p not in ("true", "false") for p in parts):
                raise ValueError("expected true/false")
            return [p == "true" for p in parts]
        if axis == "update_kind":
            bad = [p for p in parts if p not in MODES]
            if bad:
                raise ValueError(f"unknown update kinds {bad}")
            return parts
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad --values for axis {axis}: {exc}")
    raise CliError(EXIT_CONFIG, f"axis must be one of {ABLATE_AXES}, got {axis!r}")


def cmd_ablate(args) -> int:
    values = _parse_axis_values(args.axis, args.values)
    base_cfg = load_config(args.config, RUN_SCHEMA, args.set or ())
    out_root = _resolve(base_cfg, "output_dir", must_exist=False)
    out_root.mkdir(parents=True, exist_ok=True)

    total_tokens = (base_cfg["episode"]["k_segments"]
                    * base_cfg["episode"]["tokens_per_segment"])
    rows = []
    for value in values:
        overrides = list(args.set or ())
        tag = f"{args.axis}={value}"
        if args.axis == "epsilon":
            overrides.append(f"episode.epsilon={value}")
        elif args.axis == "segments":
            if total_tokens % value:
                raise CliError(EXIT_CONFIG,
                               f"segments={value} does not divide the total token "
                               f"budget {total_tokens}")
            overrides.append(f"episode.k_segments={value}")
            overrides.append(f"episode.tokens_per_segment={total_tokens // value}")
        elif args.axis == "seg_tokens":
            overrides.append(f"episode.tokens_per_segment={value}")
        elif args.axis == "multi_trigger":
            overrides.append(f"episode.multi_trigger={'true' if value else 'false'}")
        elif args.axis == "update_kind":
            overrides.append(f"mode={value}")
        overrides.append(f"output_dir={out_root / tag}")
        overrides.append(f"label={tag}")

        sub = argparse.Namespace(config=args.config, set=overrides, jobs=args.jobs)
        code = cmd_run(sub)
        if code != EXIT_OK:
            return code
        man = load_manifest(out_root / tag / "manifest.json")
        metrics_doc = read_json(out_root / tag / "metrics.json")
        summary = aggregate_run(metrics_doc["rows"])
        rows.append((tag, summary))

    table = summary_table(dict(rows))
    lines = [f"# ablate axis={args.axis} values={args.values}"]

    if args.axis == "epsilon":
        # frozen-trajectory scoring: one static pass, shared master seed, then
        # trigger rates recomputed per threshold from the fixed segment scores
        frozen_over = list(args.set or ())
        frozen_over.append("mode=static")
        frozen_over.append(f"output_dir={out_root / 'frozen-static'}")
        frozen_over.append("label=frozen-static")
        code = cmd_run(argparse.Namespace(config=args.config, set=frozen_over,
                                          jobs=args.jobs))
        if code != EXIT_OK:
            return code
        _, recs = load_episodes(out_root / "frozen-static" / "records.jsonl")
        scores = [s.trigger_score for rec in recs for s in rec.segments
                  if s.trigger_score is not None]
        eps_sorted = sorted(values)
        curve = trigger_curve(scores, eps_sorted)
        total = len(scores)
        lines.append("# frozen_trigger_rate: " + " ".join(
            f"{e:g}:{c / total:.6f}" for e, c in zip(eps_sorted, curve)))

    (out_root / "ablate.tsv").write_text("\n".join(lines) + "\n" + table)
    print(f"ablate table -> {out_root / 'ablate.tsv'}")
    return EXIT_OK


# -- ood ---------------------------------------------------------------------------


def _embedding_set(cfg: dict, section: str, model, label: str):
    spec = cfg[section]
    if (spec["texts"] is None) == (spec["embeddings"] is None):
        raise CliError(EXIT_CONFIG,
                       f"ood config section {section!r} needs exactly one of "
                       "texts/embeddings")
    if spec["embeddings"] is not None:
        return oodmod.EmbeddingSet.load(_resolve(cfg, f"{section}.embeddings"))
    if model is None:
        raise CliError(EXIT_CONFIG,
                       f"ood config: section {section!r} gives texts, so a model "
                       "path is required for embedding")
    path = _resolve(cfg, f"{section}.texts")
    texts = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not texts:
        raise CliError(EXIT_CONFIG, f"text file {path} is empty")
    return oodmod.embed_corpus(model, texts, label=label, source=str(path))


def cmd_ood(args) -> int:
    cfg = load_config(args.config, OOD_SCHEMA, args.set or ())
    model = ToyLM.load(_resolve(cfg, "model")) if cfg["model"] else None
    out_dir = _resolve(cfg, "output_dir", must_exist=False)
    out_dir.mkdir(parents=True, exist_ok=True)

    known = ("knn", "mahalanobis", "llr")
    bad = [d for d in cfg["detectors"] if d not in known]
    if bad:
        raise CliError(EXIT_CONFIG, f"unknown detectors {bad}; choose from {known}")

    reference = _embedding_set(cfg, "reference", model, "reference")
    id_set = _embedding_set(cfg, "id", model, "id")
    ood_set = _embedding_set(cfg, "ood", model, "ood")
    for name, es in (("reference", reference), ("id", id_set), ("ood", ood_set)):
        es.save(out_dir / f"{name}.emb.txt")

    results = []
    for det in cfg["detectors"]:
        if det == "knn":
            s_ood = np.array([oodmod.knn_score(v, reference.vectors, k=cfg["k"])
                              for v in ood_set.vectors])
            s_id = np.array([oodmod.knn_score(v, reference.vectors, k=cfg["k"])
                             for v in id_set.vectors])
        elif det == "mahalanobis":
            mu, sigma = oodmod.fit_gaussian(reference.vectors)
            s_ood = np.array([oodmod.mahalanobis_score(v, mu, sigma)
                              for v in ood_set.vectors])
            s_id = np.array([oodmod.mahalanobis_score(v, mu, sigma)
                             for v in id_set.vectors])
        else:
            if model is None or cfg["background_model"] is None:
                raise CliError(EXIT_CONFIG,
                               "detector llr needs model and background_model")
            if cfg["id"]["texts"] is None or cfg["ood"]["texts"] is None:
                raise CliError(EXIT_CONFIG, "detector llr needs id/ood text files")
            bg = ToyLM.load(_resolve(cfg, "background_model"))
            id_texts = [ln for ln in _resolve(cfg, "id.texts").read_text().splitlines()
                        if ln.strip()]
            ood_texts = [ln for ln in _resolve(cfg, "ood.texts").read_text().splitlines()
                         if ln.strip()]
            s_id = np.array([oodmod.llr_score(t, model, bg) for t in id_texts])
            s_ood = np.array([oodmod.llr_score(t, model, bg) for t in ood_texts])
        results.append(oodmod.evaluate(s_ood, s_id, bootstrap_n=cfg["bootstrap"],
                                       seed=cfg["seed"], detector=det))

    header = ("detector", "auroc", "ci_low", "ci_high", "aupr", "far_ood",
              "n_ood", "n_id")
    lines = ["\t".join(header)]
    for r in results:
        lines.append("\t".join([
            r.detector, f"{r.auroc:.6f}", f"{r.ci_low:.6f}", f"{r.ci_high:.6f}",
            f"{r.aupr:.6f}", str(int(r.far_ood)), str(r.n_ood), str(r.n_id)]))
    (out_dir / "ood.tsv").write_text("\n".join(lines) + "\n")
    write_json(out_dir / "ood.json", {"kind": "ood-results",
                                      "results": [r.to_record() for r in results]})
    for line in lines:
        print(line)
    return EXIT_OK


# -- report ------------------------------------------------------------------------


def _ecdf_lines(label: str, values) -> list[str]:
    vals = np.sort(np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64))
    n = vals.size
    return [f"{label}\t{v:.10g}\t{(i + 1) / n:.6f}" for i, v in enumerate(vals)]


def cmd_report(args) -> int:
    root = Path(args.records_dir)
    if not root.is_dir():
        raise CliError(EXIT_CONFIG, f"records dir not found: {root}")
    out_dir = Path(args.out) if args.out else root / "report"

    manifest_paths = sorted(root.glob("*/manifest.json"))
    if (root / "manifest.json").exists():
        manifest_paths.insert(0, root / "manifest.json")
    runs = []
    for mp in manifest_paths:
        man = load_manifest(mp)
        base = mp.parent
        _, records = load_episodes(base / man["outputs"]["records"])
        metrics_doc = read_json(base / man["outputs"]["metrics"])
        runs.append({"label": man["label"], "manifest": man,
                     "records": records, "rows": metrics_doc["rows"]})

    if not runs:
        print(f"warning: no run manifests under {root}; writing empty tables",
              file=sys.stderr)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.tsv").write_text("# no runs\n")
        return EXIT_OK

    labels = [r["label"] for r in runs]
    if len(set(labels)) != len(labels):
        raise CliError(EXIT_CONFIG, f"duplicate run labels in {root}: {labels}")

    # runs are only comparable against the same frozen artifacts
    def artifact_key(man):
        arts = man["artifacts"]
        return (arts["model"]["digest"], arts["bank"]["digest"])

    keys = {artifact_key(r["manifest"]) for r in runs}
    if len(keys) > 1 and not args.force:
        raise CliError(EXIT_DIGEST,
                       "records dir mixes runs over different model/bank artifacts; "
                       "rerun with --force to compare anyway")

    out_dir.mkdir(parents=True, exist_ok=True)
    digests = {r["label"]: r["manifest"]["config_digest"] for r in runs}
    stamp = "# runs " + " ".join(f"{k}={v[:12]}" for k, v in sorted(digests.items()))

    summary = {r["label"]: aggregate_run(r["rows"]) for r in runs}
    (out_dir / "summary.tsv").write_text(stamp + "\n" + summary_table(summary))

    traj_lines = [stamp, "run\tsegment\tbias_mean\tbias_sd\ttrigger_rate\tn"]
    for r in runs:
        k = max(len(rec.segments) for rec in r["records"])
        for j in range(k):
            scores = [rec.segments[j].trigger_score for rec in r["records"]
                      if len(rec.segments) > j
                      and rec.segments[j].trigger_score is not None]
            trigs = [rec.segments[j].triggered for rec in r["records"]
                     if len(rec.segments) > j]
            if not scores:
                continue
            traj_lines.append(
                f"{r['label']}\t{j}\t{np.mean(scores):.6f}\t{np.std(scores):.6f}"
                f"\t{np.mean(trigs):.6f}\t{len(scores)}")
    (out_dir / "trajectories.tsv").write_text("\n".join(traj_lines) + "\n")

    bias_lines = [stamp, "run\tbias_mean\tcum_frac"]
    time_lines = [stamp, "run\tupdate_time_total\tcum_frac"]
    for r in runs:
        bias_lines += _ecdf_lines(r["label"], [row["bias_mean"] for row in r["rows"]])
        time_lines += _ecdf_lines(
            r["label"], [row["timing"]["update_time_total"] for row in r["rows"]])
    (out_dir / "ecdf_bias.tsv").write_text("\n".join(bias_lines) + "\n")
    (out_dir / "ecdf_update_time.tsv").write_text("\n".join(time_lines) + "\n")

    # DiD of each run against the static baseline when one is present
    did_lines = [stamp,
                 "system\tbaseline\tsegment\tn\texcluded\tdid_mean\tt_stat\tp_value"]
    baseline = next((r for r in runs if r["manifest"]["mode"] == "static"), None)
    if baseline is not None:
        base_trajs = {rec.prompt_id: [s.trigger_score for s in rec.segments]
                      for rec in baseline["records"]}
        for r in runs:
            if r is baseline:
                continue
            sys_trajs = {rec.prompt_id: [s.trigger_score for s in rec.segments]
                         for rec in r["records"]}
            k = max(len(t) for t in sys_trajs.values())
            for j in range(1, k):
                diffs, excluded = metrics.did_series(sys_trajs, base_trajs, j)
                if len(diffs) < 2:
                    continue
                t = metrics.paired_t_test(diffs)
                stat = "nan" if t.degenerate else f"{t.statistic:.6f}"
                pval = "nan" if t.degenerate else f"{t.p_value:.6g}"
                did_lines.append(
                    f"{r['label']}\t{baseline['label']}\t{j}\t{len(diffs)}"
                    f"\t{excluded}\t{np.mean(diffs):.6f}\t{stat}\t{pval}")
    (out_dir / "did.tsv").write_text("\n".join(did_lines) + "\n")

    print(f"report -> {out_dir}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttalab")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (dotted path, JSON value)")

    p = sub.add_parser("precompute", help="estimate the diagonal Fisher once")
    add_config_args(p)
    p.add_argument("--verify", action="store_true",
                   help="recompute and compare against the existing artifact")
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("run", help="run episodes over a prompt set")
    add_config_args(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="sweep one config axis")
    add_config_args(p)
    p.add_argument("--axis", required=True, choices=ABLATE_AXES)
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("ood", help="run embedding-based OOD detectors")
    add_config_args(p)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("report", help="summaries, trajectories, ECDFs, DiD")
    p.add_argument("records_dir")
    p.add_argument("--out", help="output directory (default <records_dir>/report)")
    p.add_argument("--force", action="store_true",
                   help="allow mixing runs over different artifacts")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
