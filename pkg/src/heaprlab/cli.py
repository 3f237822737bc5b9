"""Command-line pipeline driver.

Every subcommand reads one declarative TOML config (sections mirror the
RunConfig dataclasses), applies ``--set section.key=value`` overrides, and
writes its products under the configured output directory together with a
``<command>_run.json`` recording the tool version and config hash.
Outputs carry no timestamps, so a rerun with the same config reproduces
them byte for byte.

Exit codes: 0 success, 2 for unusable invocations (unknown flags, malformed
config, bad override syntax), 1 for failures at run time.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - 3.10 fallback
    import tomli as tomllib

import numpy as np

from . import __version__
from .bench import (
    METHODS,
    CorpusSpec,
    EvalSettings,
    PruneSettings,
    RunConfig,
    TrainSettings,
    batches,
    config_hash,
    count_flops,
    generate_corpus,
    importance_for_method,
    load_corpus,
    manifest_for_method,
    perplexity,
    save_corpus,
    sweep_rows,
    train_recipe,
    write_sweep_csv,
)
from .heapr import (
    AtomicExpertKey,
    GradCovariance,
    apply_prune,
    compute_importances,
    estimate_covariances,
    heapr_pipeline,
    read_importance_csv,
    write_importance_csv,
    write_manifest_json,
)
from .model import (
    MoEConfig,
    PassCounter,
    TrainingError,
    init_model,
    load_model,
    save_model,
)
from .oracle import (
    constrained_prune_cost_check,
    fd_cross_hessian,
    fisher_hessian_softmax_check,
    obs_prediction_report,
    shared_gradient_check,
    write_obs_csv,
    write_obs_json,
)
from .core_math import seeded_rng


class ConfigError(ValueError):
    """Unusable invocation: malformed config file or override."""


OUT_ROOT_ENV = "HEAPRLAB_OUT_ROOT"

_SECTIONS = {
    "model": MoEConfig,
    "corpus": CorpusSpec,
    "train": TrainSettings,
    "prune": PruneSettings,
    "eval": EvalSettings,
}
_TOP_LEVEL = {"calib_batch_size", "seed", "deterministic", "out_dir"}


def _parse_value(text: str):
    """Coerce an override string: JSON literals first, then bare strings.

    Comma-separated values become a list so tuple fields like
    corpus.fractions can be set from the command line.
    """
    if "," in text:
        return [_parse_value(part) for part in text.split(",")]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(raw: dict, pairs) -> dict:
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        path, value = pair.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) == 1 and parts[0] in _TOP_LEVEL:
            raw[parts[0]] = _parse_value(value)
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            raw.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
        else:
            raise ConfigError(
                f"unknown config key {path!r}; use one of "
                f"{sorted(_TOP_LEVEL)} or <section>.<key> with sections {sorted(_SECTIONS)}"
            )
    return raw


def _build_config(raw: dict) -> RunConfig:
    known = _TOP_LEVEL | set(_SECTIONS)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections/keys: {sorted(unknown)}")
    kwargs = {}
    for section, cls in _SECTIONS.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        if section == "corpus" and "fractions" in body:
            body = dict(body)
            body["fractions"] = tuple(body["fractions"])
        try:
            kwargs[section] = cls(**body)
        except TypeError as exc:
            raise ConfigError(f"bad key in [{section}]: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"bad value in [{section}]: {exc}") from exc
    for key in _TOP_LEVEL:
        if key in raw:
            kwargs[key] = raw[key]
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad run config: {exc}") from exc


def load_config(path: str | None, overrides) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    return _build_config(_apply_overrides(raw, overrides))


def _out_dir(config: RunConfig) -> str:
    root = os.environ.get(OUT_ROOT_ENV, "")
    path = config.out_dir
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out: str, command: str, config: RunConfig) -> None:
    payload = {
        "command": command,
        "tool_version": __version__,
        "config_hash": config_hash(config),
        "config": config.to_dict(),
    }
    # {command}_run.json, not *_manifest.json: prune_manifest.json is taken
    # by the pruning record itself.
    with open(os.path.join(out, f"{command}_run.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _corpus_path(out: str) -> str:
    return os.path.join(out, "corpus.npz")


def _ensure_corpus(config: RunConfig, out: str):
    path = _corpus_path(out)
    if os.path.exists(path):
        corpus = load_corpus(path)
        if corpus.spec != config.corpus:
            raise ConfigError(
                f"{path} was generated from a different corpus spec; "
                "delete it or point out_dir elsewhere"
            )
        return corpus
    corpus = generate_corpus(config.corpus)
    save_corpus(corpus, path)
    return corpus


def _ensure_model(config: RunConfig, out: str):
    path = os.path.join(out, "model.npz")
    if os.path.exists(path):
        return load_model(path)
    corpus = _ensure_corpus(config, out)
    recipe = train_recipe(
        init_model(config.model), corpus.train, config.train,
        seed=config.seed, polish_sequences=corpus.calib,
    )
    save_model(recipe.model, path)
    return recipe.model


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = generate_corpus(config.corpus)
    save_corpus(corpus, _corpus_path(out))
    _write_manifest(out, "gen-corpus", config)
    print(
        f"corpus: train={corpus.train.shape[0]} calib={corpus.calib.shape[0]} "
        f"test={corpus.test.shape[0]} sequences -> {_corpus_path(out)}"
    )


def cmd_train(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = _ensure_corpus(config, out)
    recipe = train_recipe(
        init_model(config.model), corpus.train, config.train,
        seed=config.seed, polish_sequences=corpus.calib,
    )
    model = recipe.model
    path = os.path.join(out, "model.npz")
    save_model(model, path)
    report = {
        "train_perplexity": perplexity(model, corpus.train, batch_size=config.eval.batch_size),
        "calib_perplexity": perplexity(model, corpus.calib, batch_size=config.eval.batch_size),
        "steps_kept": int(recipe.losses.size),
        "restarts": recipe.restarts,
        "polish_converged": recipe.polish_converged,
        "final_grad_norm": recipe.final_grad_norm,
    }
    with open(os.path.join(out, "train.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "train", config)
    print(f"model -> {path} (calib ppl {report['calib_perplexity']:.4f})")


def cmd_calibrate(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = _ensure_corpus(config, out)
    model = _ensure_model(config, out)
    counter = PassCounter()
    calib = batches(corpus.calib, config.calib_batch_size)
    covs = estimate_covariances(model, calib, counter=counter)
    payload = {"format": np.array("heaprlab-covariances-v1")}
    for cov in covs:
        tag = f"{cov.layer}:{cov.expert}"
        payload[f"matrix:{tag}"] = cov.matrix
        payload[f"count:{tag}"] = np.array(cov.token_count)
    path = os.path.join(out, "covariances.npz")
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    with open(os.path.join(out, "calibrate.json"), "w") as fh:
        json.dump(
            {"forward_passes": counter.forward, "backward_passes": counter.backward,
             "batches": len(calib)},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _write_manifest(out, "calibrate", config)
    print(f"covariances for {len(covs)} experts -> {path}")


def _load_covariances(model, path) -> list:
    covs = []
    with np.load(path, allow_pickle=False) as data:
        for layer in range(model.config.num_layers):
            for expert in range(model.config.num_experts):
                tag = f"{layer}:{expert}"
                covs.append(
                    GradCovariance(layer, expert, data[f"matrix:{tag}"], int(data[f"count:{tag}"]))
                )
    return covs


def cmd_score(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = _ensure_corpus(config, out)
    model = _ensure_model(config, out)
    calib = batches(corpus.calib, config.calib_batch_size)
    cov_path = os.path.join(out, "covariances.npz")
    if config.prune.method == "heapr" and os.path.exists(cov_path):
        table = compute_importances(model, calib, _load_covariances(model, cov_path))
    else:
        table = importance_for_method(
            config.prune.method, model, calib,
            seed=config.seed, camera_alpha=config.prune.camera_alpha,
        )
    path = os.path.join(out, "importance.csv")
    write_importance_csv(table, path)
    _write_manifest(out, "score", config)
    print(f"{table.method} scores for {len(table.scores)} atomic experts -> {path}")


def cmd_prune(config: RunConfig, args) -> None:
    out = _out_dir(config)
    model = _ensure_model(config, out)
    imp_path = os.path.join(out, "importance.csv")
    if os.path.exists(imp_path):
        table = read_importance_csv(imp_path)
    else:
        corpus = _ensure_corpus(config, out)
        calib = batches(corpus.calib, config.calib_batch_size)
        table = importance_for_method(
            config.prune.method, model, calib,
            seed=config.seed, camera_alpha=config.prune.camera_alpha,
        )
    manifest = manifest_for_method(
        config.prune.method, table, config.prune.ratio,
        mode=config.prune.mode, channel_floor=config.prune.channel_floor,
    )
    pruned = apply_prune(model, manifest)
    man_path = os.path.join(out, "prune_manifest.json")
    write_manifest_json(manifest, man_path, tool_version=__version__, config_hash=config_hash(config))
    save_model(pruned, os.path.join(out, "pruned_model.npz"))
    print(
        f"pruned {len(manifest.pruned)} channels (skipped {len(manifest.skipped)} at floor) "
        f"-> {man_path}"
    )
    _write_manifest(out, "prune", config)


def cmd_eval(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = _ensure_corpus(config, out)
    model = _ensure_model(config, out)
    split = getattr(corpus, config.eval.split)
    report = {
        "split": config.eval.split,
        "baseline_perplexity": perplexity(model, split, batch_size=config.eval.batch_size),
        "flops": count_flops(model).to_dict(),
    }
    pruned_path = os.path.join(out, "pruned_model.npz")
    if os.path.exists(pruned_path):
        pruned = load_model(pruned_path)
        report["pruned_perplexity"] = perplexity(pruned, split, batch_size=config.eval.batch_size)
        report["pruned_flops"] = count_flops(pruned).to_dict()
    path = os.path.join(out, "eval.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "eval", config)
    print(f"eval -> {path}")


def cmd_oracle(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = _ensure_corpus(config, out)
    model = _ensure_model(config, out)
    calib = batches(corpus.calib, config.calib_batch_size)
    pipe = heapr_pipeline(model, calib, config.prune.ratio, config.prune.mode,
                          channel_floor=config.prune.channel_floor)
    report = obs_prediction_report(model, calib, pipe.table)
    write_obs_csv(report, os.path.join(out, "obs.csv"))
    write_obs_json(report, os.path.join(out, "obs.json"))

    rng = seeded_rng(config.seed, 4)
    tiny = init_model(MoEConfig(vocab=8, d_model=4, d_inter=3, num_experts=2, kappa=1,
                                num_layers=1, seq_len=8, seed=config.seed))
    x = rng.normal(size=4)
    summary = {
        "spearman_rho": report.spearman_rho,
        "shared_gradient_max_dev": shared_gradient_check(model, corpus.calib[:4]),
        "fisher_mc_rel_error": fisher_hessian_softmax_check(8, 10**5, config.seed),
        "fisher_exact_rel_error": fisher_hessian_softmax_check(8, 0, config.seed, exact=True),
        "fd_cross_hessian_distinct": fd_cross_hessian(
            tiny, x, AtomicExpertKey(0, 0, 0), AtomicExpertKey(0, 0, 1)
        ),
    }
    check = constrained_prune_cost_check(tiny, x, AtomicExpertKey(0, 0, 0), seed=config.seed)
    summary["constrained_cost_rel_gap"] = (
        abs(check.achieved_cost - check.direct_cost) / max(abs(check.direct_cost), 1e-300)
        if check.feasible else None
    )
    with open(os.path.join(out, "oracle.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "oracle", config)
    print(f"oracle report -> {os.path.join(out, 'oracle.json')} (rho {report.spearman_rho:.3f})")


def _parse_ratios(text: str) -> list:
    try:
        ratios = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad ratio list {text!r}: {exc}") from exc
    if not ratios:
        raise ConfigError("ratio list is empty")
    return ratios


def cmd_sweep(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = _ensure_corpus(config, out)
    model = _ensure_model(config, out)
    calib = batches(corpus.calib, config.calib_batch_size)
    ratios = _parse_ratios(args.ratios)
    table = importance_for_method(
        config.prune.method, model, calib,
        seed=config.seed, camera_alpha=config.prune.camera_alpha,
    )
    rows = sweep_rows(
        model, table, getattr(corpus, config.eval.split), ratios,
        method=config.prune.method, mode=config.prune.mode, seed=config.seed,
        channel_floor=config.prune.channel_floor, batch_size=config.eval.batch_size,
    )
    path = os.path.join(out, "sweep.csv")
    write_sweep_csv(rows, path)
    _write_manifest(out, "sweep", config)
    print(f"{len(rows)} sweep rows -> {path}")


def cmd_compare(config: RunConfig, args) -> None:
    out = _out_dir(config)
    corpus = _ensure_corpus(config, out)
    model = _ensure_model(config, out)
    calib = batches(corpus.calib, config.calib_batch_size)
    ratios = _parse_ratios(args.ratios)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {METHODS}")
    rows = []
    for method in methods:
        # camera scores are layer-local; it runs layerwise no matter the config
        mode = "layerwise" if method == "camera" else config.prune.mode
        table = importance_for_method(
            method, model, calib, seed=config.seed, camera_alpha=config.prune.camera_alpha,
        )
        rows.extend(
            sweep_rows(
                model, table, getattr(corpus, config.eval.split), ratios,
                method=method, mode=mode, seed=config.seed,
                channel_floor=config.prune.channel_floor, batch_size=config.eval.batch_size,
            )
        )
    path = os.path.join(out, "compare.csv")
    write_sweep_csv(rows, path)
    _write_manifest(out, "compare", config)
    print(f"{len(rows)} comparison rows ({len(methods)} methods) -> {path}")


_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "score": cmd_score,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heaprlab",
        description="Atomic-expert pruning workbench: corpus, training, scoring, "
                    "pruning, evaluation, and verification reports.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    descriptions = {
        "gen-corpus": "sample the synthetic corpus and write corpus.npz",
        "train": "train a model on the corpus and write model.npz",
        "calibrate": "estimate per-expert gradient covariances on the calibration split",
        "score": "turn covariances into an atomic-expert importance table (importance.csv)",
        "prune": "rank and zero atomic experts; write prune_manifest.json + pruned_model.npz",
        "eval": "perplexity + FLOPs for the trained (and pruned, if present) model",
        "oracle": "prediction-fidelity and exactness reports (obs.csv, oracle.json)",
        "sweep": "prune at a ratio grid and record perplexity/FLOPs per ratio (sweep.csv)",
        "compare": "sweep several scoring methods on one model (compare.csv)",
    }
    for name, handler in _COMMANDS.items():
        p = sub.add_parser(name, help=descriptions[name], description=descriptions[name])
        p.add_argument("--config", help="TOML run config; defaults apply when omitted")
        p.add_argument(
            "--set", action="append", metavar="SECTION.KEY=VALUE",
            help="override one config value (repeatable)",
        )
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="master seed (overrides config seed)")
        if name in ("sweep", "compare"):
            p.add_argument("--ratios", default="0,0.1,0.2,0.3,0.4,0.6,0.8",
                           help="comma-separated compression ratios")
        if name == "compare":
            p.add_argument("--methods", default="heapr,random,magnitude,expert_drop",
                           help="comma-separated scoring methods")
        p.set_defaults(handler=handler)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = list(args.set or [])
        if args.out is not None:
            overrides.append(f"out_dir={args.out}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        config = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"heaprlab: config error: {exc}", file=sys.stderr)
        return 2
    try:
        args.handler(config, args)
    except ConfigError as exc:
        print(f"heaprlab: config error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"heaprlab: training diverged: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError) as exc:
        print(f"heaprlab: {exc}", file=sys.stderr)
        return 1
    return 0


cli_main = main


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
