"""Command-line interface: `demix <subcommand>`.

Exit codes: 0 on success, otherwise the failing error class decides
(validation 2, archive 3, training 4, metrics 5, search 6, pipeline 7;
`tensor diff` exits 1 when the archives differ).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, merge_engine, mixture_search, pipeline, toy_lab
from .config import ExperimentConfig, load_config
from .dedup import dedup_corpus
from .errors import DemixError, ValidationError
from .merge_engine import MergeSpec, MixtureRatio
from .pipeline import ExperimentManifest, read_score_csv, write_score_csv
from .tensor_store import load_archive, read_header, save_archive


def _parse_ratio(text: str, candidate_ids: list[str]) -> MixtureRatio:
    weights = [float(part) for part in text.split(",")]
    return MixtureRatio(weights=weights, candidate_ids=candidate_ids)


def _cmd_tensor(args) -> int:
    if args.action == "inspect":
        header = read_header(args.path)
        doc = {
            "format_version": header.format_version,
            "metadata": header.metadata,
            "tensors": [
                {"name": n, "shape": list(s), "offset": o, "length": l}
                for n, s, o, l in header.index
            ],
        }
        if args.json:
            print(json.dumps(doc, indent=2, sort_keys=True))
        else:
            print(f"format version {doc['format_version']}")
            for key, value in sorted(header.metadata.items()):
                print(f"  {key} = {value}")
            for t in doc["tensors"]:
                print(f"  {t['name']}  shape={t['shape']}  bytes={t['length']}")
        return 0
    if args.action == "checksum":
        print(load_archive(args.path).checksum())
        return 0
    a = load_archive(args.path)
    b = load_archive(args.other)
    if a.schema() != b.schema():
        print("schemas differ", file=sys.stderr)
        return 1
    worst = 0.0
    for name in a.names():
        diff = float(np.max(np.abs(a.entries[name] - b.entries[name]))) if a.entries[name].size else 0.0
        worst = max(worst, diff)
        print(f"{name}: max abs diff {diff:.3e}")
    return 0 if worst <= args.atol else 1


def _cmd_merge(args) -> int:
    paths = [Path(p) for p in args.components.split(",")]
    components = [load_archive(p) for p in paths]
    candidate_ids = [p.stem for p in paths]
    ratio = _parse_ratio(args.ratio, candidate_ids)
    hyperparams = {}
    for item in args.hyperparam or []:
        key, _, value = item.partition("=")
        if not value:
            raise ValidationError(f"--hyperparam expects key=value, got {item!r}")
        hyperparams[key] = float(value)
    spec = MergeSpec(method=args.method, hyperparams=hyperparams, seed=args.seed)
    base = load_archive(args.base) if args.base else None
    merged = merge_engine.merge(components, ratio, spec, base=base, model_id="merged")
    save_archive(merged, args.out, metadata={"method": args.method, "ratio": args.ratio})
    print(f"wrote {args.out}")
    return 0


def _load_component_dir(directory: Path):
    base_path = directory / "base.dmxt"
    if not base_path.exists():
        raise ValidationError(f"{directory}: missing base.dmxt")
    base = load_archive(base_path)
    components, candidate_ids = [], []
    for path in sorted(directory.glob("component_*.dmxt")):
        candidate_ids.append(path.stem.removeprefix("component_"))
        components.append(load_archive(path))
    if not components:
        raise ValidationError(f"{directory}: no component_*.dmxt archives")
    return base, components, candidate_ids


def _cmd_search(args) -> int:
    base, components, candidate_ids = _load_component_dir(Path(args.components))
    lab = toy_lab.load_lab(args.benchmarks)
    plan = mixture_search.SamplePlan(
        per_iteration_counts=[int(c) for c in args.plan.split(",")],
        final_candidate_pool=args.pool,
        top_k_average=args.topk,
        rng_seed=args.seed,
    )
    spec = MergeSpec(method=args.method, seed=args.merge_seed)
    evaluator = pipeline.ProxyEvaluator(components, lab.tasks, spec, base)
    best, transcript = mixture_search.run_search(
        evaluator, candidate_ids, plan, benchmark_domains=lab.domain_of_benchmarks()
    )
    result = {
        "best_mixture": best.as_dict(),
        "evaluations": len(transcript.evaluations),
        "planned_evaluations": plan.total_evaluations(),
    }
    Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    if args.transcript:
        Path(args.transcript).write_text(transcript.to_jsonl())
    print(json.dumps(result["best_mixture"], sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    reference = read_score_csv(args.reference, args.domains)
    proxy = read_score_csv(args.proxy, args.domains)
    report = pipeline.proxy_reference_consistency(reference, proxy)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(
        f"macro rho {report['macro_avg_rho']:.3f}, "
        f"mean capability recovery {report['mean_capability_recovery']:.3f}"
    )
    return 0


def _cmd_dedup(args) -> int:
    docs = []
    with open(args.input) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            docs.append((doc["id"], doc["text"]))
    result = dedup_corpus(docs, mode=args.mode, seed=args.seed, ngram=args.ngram)
    Path(args.report).write_text(json.dumps(result.to_report(), indent=2, sort_keys=True) + "\n")
    if args.out:
        kept = set(result.kept_ids)
        with open(args.out, "w") as fh:
            for doc_id, text in docs:
                if doc_id in kept:
                    fh.write(json.dumps({"id": doc_id, "text": text}, sort_keys=True) + "\n")
    print(f"kept {len(result.kept_ids)}, removed {len(result.removed_ids)}")
    return 0


def _training_config(config: ExperimentConfig) -> toy_lab.ComponentTrainingConfig:
    return toy_lab.ComponentTrainingConfig(
        general_mix_beta=config.training.beta,
        steps=config.training.steps,
        step_size=config.training.step_size,
        batch_size=config.training.batch_size,
        seed=config.seed,
        model_family=config.lab.family,
        hidden_units=config.lab.hidden_units,
        base_steps=config.training.base_steps,
        full_batch=config.training.full_batch,
    )


def _cmd_lab(args) -> int:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.action == "gen":
        lab = toy_lab.make_domains(
            n_domains=config.lab.n_domains,
            d=config.lab.feature_dim,
            seed=config.seed,
            family=config.lab.family,
            examples_per_domain=config.lab.examples_per_domain,
            general_examples=config.lab.general_examples,
            benchmark_examples=config.lab.benchmark_examples,
            noise_std=config.lab.noise_std,
            own_std=config.lab.own_std,
            foreign_std=config.lab.foreign_std,
            shared_dims=config.lab.shared_dims,
            shared_target_std=config.lab.shared_target_std,
            own_target_std=config.lab.own_target_std,
            hidden_units=config.lab.hidden_units,
        )
        toy_lab.save_lab(lab, args.out)
        print(f"wrote {args.out}")
        return 0
    lab = toy_lab.load_lab(args.lab)
    if args.action == "train-components":
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        base, components = toy_lab.prepare_components(
            lab.candidates, lab.general, _training_config(config)
        )
        save_archive(base, out_dir / "base.dmxt")
        for cand, comp in zip(lab.candidates, components):
            save_archive(comp, out_dir / f"component_{cand.id}.dmxt")
        print(f"wrote base + {len(components)} components to {out_dir}")
        return 0
    if args.action == "train-references":
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        base = load_archive(args.base)
        candidate_ids = [c.id for c in lab.candidates]
        ratios = mixture_search.sample_simplex(
            len(candidate_ids), args.count, args.seed, candidate_ids=candidate_ids
        )
        table = toy_lab.build_reference_set(
            lab.candidates, lab.general, ratios, base, lab.tasks, _training_config(config)
        )
        write_score_csv(table, out_dir / "references.csv", out_dir / "domains.csv")
        (out_dir / "reference_ratios.json").write_text(
            json.dumps([r.as_dict() for r in ratios], indent=2, sort_keys=True) + "\n"
        )
        print(f"wrote {len(ratios)} reference rows to {out_dir}")
        return 0
    model = load_archive(args.model)
    row = toy_lab.evaluate_model(model, lab.tasks)
    print(json.dumps(row, indent=2, sort_keys=True))
    return 0


def _cmd_run(args) -> int:
    config = load_config(args.config)
    manifest = pipeline.run_pipeline(config, run_root=args.run_root)
    print(f"run dir: {manifest.run_dir}")
    for name in pipeline.STAGE_ORDER:
        if name in manifest.stages:
            record = manifest.stages[name]
            flag = "ran" if record.get("recomputed") else "cached"
            print(f"  {name}: {record['status']} ({flag})")
    report = pipeline.load_report(manifest)
    print(pipeline.format_report(report))
    return 0


def _cmd_report(args) -> int:
    manifest = ExperimentManifest.load(args.manifest)
    report = pipeline.load_report(manifest)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        print(pipeline.format_report(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="demix", description=__doc__)
    parser.add_argument("--version", action="version", version=f"demix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    tensor = sub.add_parser("tensor", help="inspect, diff or checksum tensor archives")
    tensor.add_argument("action", choices=["inspect", "diff", "checksum"])
    tensor.add_argument("path")
    tensor.add_argument("other", nargs="?", help="second archive (diff only)")
    tensor.add_argument("--atol", type=float, default=0.0)
    tensor.add_argument("--json", action="store_true")
    tensor.set_defaults(fn=_cmd_tensor)

    merge = sub.add_parser("merge", help="merge component archives at a mixture ratio")
    merge.add_argument("--method", default="linear", choices=merge_engine.MERGE_METHODS)
    merge.add_argument("--ratio", required=True, help="comma-separated weights")
    merge.add_argument("--components", required=True, help="comma-separated archive paths")
    merge.add_argument("--base", help="base archive (required for delta-based methods)")
    merge.add_argument("--seed", type=int, help="seed for stochastic methods")
    merge.add_argument("--hyperparam", action="append", metavar="KEY=VALUE")
    merge.add_argument("--out", required=True)
    merge.set_defaults(fn=_cmd_merge)

    search = sub.add_parser("search", help="run the iterative mixture search over merged proxies")
    search.add_argument("--components", required=True, help="directory with base + component archives")
    search.add_argument("--benchmarks", required=True, help="lab .npz with benchmark tasks")
    search.add_argument("--plan", default="64,32,16")
    search.add_argument("--pool", type=int, default=100_000)
    search.add_argument("--topk", type=int, default=128)
    search.add_argument("--seed", type=int, default=0)
    search.add_argument("--method", default="linear", choices=merge_engine.MERGE_METHODS)
    search.add_argument("--merge-seed", type=int, default=None)
    search.add_argument("--out", required=True)
    search.add_argument("--transcript")
    search.set_defaults(fn=_cmd_search)

    evalp = sub.add_parser("eval", help="consistency metrics between two score tables")
    evalp.add_argument("--reference", required=True)
    evalp.add_argument("--proxy", required=True)
    evalp.add_argument("--domains", required=True)
    evalp.add_argument("--out", required=True)
    evalp.set_defaults(fn=_cmd_eval)

    dedup = sub.add_parser("dedup", help="exact + fuzzy deduplication of a JSONL corpus")
    dedup.add_argument("--in", dest="input", required=True)
    dedup.add_argument("--mode", default="both", choices=["exact", "fuzzy", "both"])
    dedup.add_argument("--seed", type=int, default=0)
    dedup.add_argument("--ngram", type=int, default=24)
    dedup.add_argument("--report", required=True)
    dedup.add_argument("--out", help="write kept documents here")
    dedup.set_defaults(fn=_cmd_dedup)

    lab = sub.add_parser("lab", help="generate data, train components/references, evaluate")
    lab.add_argument("action", choices=["gen", "train-components", "train-references", "evaluate"])
    lab.add_argument("--config", help="experiment config file")
    lab.add_argument("--lab", help="lab .npz (required except for gen)")
    lab.add_argument("--out", help="output path (gen)")
    lab.add_argument("--out-dir", help="output directory (training actions)")
    lab.add_argument("--base", help="base archive (train-references)")
    lab.add_argument("--count", type=int, default=24)
    lab.add_argument("--seed", type=int, default=0)
    lab.add_argument("--model", help="model archive (evaluate)")
    lab.set_defaults(fn=_cmd_lab)

    run = sub.add_parser("run", help="run the full pipeline from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--run-root", help="override the run directory root")
    run.set_defaults(fn=_cmd_run)

    report = sub.add_parser("report", help="print the report for a finished run")
    report.add_argument("--manifest", required=True)
    report.add_argument("--json", action="store_true")
    report.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DemixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
