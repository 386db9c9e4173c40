"""End-to-end pipeline: lab generation, component preparation, optional
reference training and consistency reporting, proxy-based mixture search,
and the final report.

Stages are cached by a content hash over their config subsection and input
artifacts; rerunning a finished experiment recomputes nothing, and deleting
an intermediate artifact recomputes only that stage and, where their inputs
actually changed, the stages downstream of it. The search stage evaluates
proxies by merging and benchmarking only; it never trains.

Reports and transcripts contain no timestamps and serialize with sorted keys,
so identical configs produce byte-identical result files.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import merge_engine, mixture_search, toy_lab
from .config import ExperimentConfig
from .dedup import dedup_corpus
from .errors import PipelineError, ValidationError
from .eval_metrics import ScoreTable, capability_recovery, consistency_report, rank_table
from .merge_engine import MergeSpec, MixtureRatio
from .mixture_search import PredictorConfig, ProxyEvaluation, SamplePlan
from .tensor_store import ParameterSet, load_archive, save_archive

STAGE_ORDER = ["dedup", "lab", "components", "references", "consistency", "search", "report"]


@dataclass
class ExperimentManifest:
    config: dict
    config_hash: str
    run_dir: str
    stages: dict[str, dict] = field(default_factory=dict)
    created_at: float = 0.0

    def stage(self, name: str) -> dict:
        return self.stages.setdefault(
            name, {"status": "pending", "hash": None, "outputs": {}, "recomputed": False}
        )

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "config_hash": self.config_hash,
            "run_dir": self.run_dir,
            "stages": self.stages,
            "created_at": self.created_at,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        doc = json.loads(Path(path).read_text())
        return cls(
            config=doc["config"],
            config_hash=doc["config_hash"],
            run_dir=doc["run_dir"],
            stages=doc["stages"],
            created_at=doc.get("created_at", 0.0),
        )


def _file_hash(path: Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _stage_hash(config_part: dict, input_paths: list[Path]) -> str:
    doc = {
        "config": config_part,
        "inputs": {str(p.name): _file_hash(p) for p in input_paths},
    }
    return hashlib.blake2b(
        json.dumps(doc, sort_keys=True).encode("utf-8"), digest_size=16
    ).hexdigest()


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_score_csv(table: ScoreTable, scores_path: Path, domains_path: Path | None = None) -> None:
    lines = ["model_id,benchmark_id,score"]
    for model in table.models():
        for bench in table.benchmarks():
            lines.append(f"{model},{bench},{table.rows[model][bench]!r}")
    scores_path.write_text("\n".join(lines) + "\n")
    if domains_path is not None:
        rows = ["benchmark_id,domain"]
        rows += [f"{b},{table.domain_of[b]}" for b in table.benchmarks()]
        domains_path.write_text("\n".join(rows) + "\n")


def read_score_csv(scores_path, domains_path) -> ScoreTable:
    rows: dict[str, dict[str, float]] = {}
    lines = Path(scores_path).read_text().strip().splitlines()
    if not lines or lines[0].split(",")[:3] != ["model_id", "benchmark_id", "score"]:
        raise ValidationError(f"{scores_path}: expected header model_id,benchmark_id,score")
    for line in lines[1:]:
        model, bench, score = line.split(",")
        rows.setdefault(model, {})[bench] = float(score)
    domain_of = {}
    dlines = Path(domains_path).read_text().strip().splitlines()
    if not dlines or dlines[0].split(",")[:2] != ["benchmark_id", "domain"]:
        raise ValidationError(f"{domains_path}: expected header benchmark_id,domain")
    for line in dlines[1:]:
        bench, domain = line.split(",")
        domain_of[bench] = domain
    return ScoreTable(rows=rows, domain_of=domain_of)


class ProxyEvaluator:
    """Merge-then-benchmark evaluator used by the search stage (training-free)."""

    def __init__(self, components, tasks, spec: MergeSpec, base: ParameterSet | None):
        self.components = components
        self.tasks = tasks
        self.spec = spec
        self.base = base
        self.calls = 0

    def __call__(self, ratio: MixtureRatio) -> ProxyEvaluation:
        self.calls += 1
        proxy = merge_engine.merge(self.components, ratio, self.spec, base=self.base)
        scores = toy_lab.evaluate_model(proxy, self.tasks)
        return ProxyEvaluation(ratio=ratio, per_benchmark_scores=scores)


def build_proxy_table(
    components, ratios, tasks, spec: MergeSpec | None = None,
    base: ParameterSet | None = None, id_prefix: str = "mix",
) -> ScoreTable:
    """Score merged proxies for a list of ratios; row ids align with
    build_reference_set so the two tables are directly comparable."""
    spec = spec or MergeSpec(method="linear")
    rows = {}
    for j, ratio in enumerate(ratios):
        proxy = merge_engine.merge(components, ratio, spec, base=base)
        rows[f"{id_prefix}_{j:03d}"] = toy_lab.evaluate_model(proxy, tasks)
    return ScoreTable(rows=rows, domain_of={t.id: t.domain for t in tasks})


def proxy_reference_consistency(reference: ScoreTable, proxy: ScoreTable) -> dict:
    """Correlation report plus mean capability recovery, as a plain dict."""
    report = consistency_report(reference, proxy)
    recoveries = [
        capability_recovery(proxy.overall_average(m), reference.overall_average(m))
        for m in reference.models()
    ]
    return {
        "per_domain_rho": report.per_domain_rho,
        "macro_avg_rho": report.macro_avg_rho,
        "top_quartile_rho": report.top_quartile_rho,
        "top_quartile_macro": report.top_quartile_macro,
        "mean_capability_recovery": float(np.mean(recoveries)),
        "n_models": len(reference.models()),
    }


class _RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"run directory is locked by another process ({self.path}); "
                "remove the stale .lock file if no run is active"
            ) from None
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def run_pipeline(config: ExperimentConfig, run_root: str | None = None) -> ExperimentManifest:
    """Execute all stages for a config, reusing cached results where valid."""
    root = Path(run_root if run_root is not None else config.run_root)
    run_dir = root / config.content_hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        manifest = ExperimentManifest.load(manifest_path)
        if manifest.config_hash != config.content_hash():
            raise PipelineError("manifest in run directory belongs to a different config")
    else:
        manifest = ExperimentManifest(
            config=config.resolved(),
            config_hash=config.content_hash(),
            run_dir=str(run_dir),
            created_at=time.time(),
        )
    manifest.run_dir = str(run_dir)

    with _RunLock(run_dir):
        try:
            _run_stages(config, run_dir, manifest)
        finally:
            manifest.save(manifest_path)
    return manifest


def _outputs_exist(run_dir: Path, record: dict) -> bool:
    return all((run_dir / rel).exists() for rel in record.get("outputs", {}).values())


def _execute(manifest, run_dir: Path, name: str, stage_hash: str, outputs: dict, fn) -> bool:
    """Run one stage unless its hash matches and outputs are present."""
    record = manifest.stage(name)
    if (
        record["status"] == "done"
        and record["hash"] == stage_hash
        and _outputs_exist(run_dir, record)
    ):
        record["recomputed"] = False
        return False
    record.update(
        {"status": "running", "hash": stage_hash, "outputs": outputs, "recomputed": True}
    )
    record["started_at"] = time.time()
    try:
        fn()
    except Exception as exc:
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
        raise
    record["status"] = "done"
    record["error"] = None
    record["finished_at"] = time.time()
    return True


def _run_stages(config: ExperimentConfig, run_dir: Path, manifest: ExperimentManifest) -> None:
    seed = config.seed
    lab_cfg = config.lab
    train_cfg = toy_lab.ComponentTrainingConfig(
        general_mix_beta=config.training.beta,
        steps=config.training.steps,
        step_size=config.training.step_size,
        batch_size=config.training.batch_size,
        seed=seed,
        model_family=lab_cfg.family,
        hidden_units=lab_cfg.hidden_units,
        base_steps=config.training.base_steps,
        full_batch=config.training.full_batch,
    )

    if config.dedup.enabled:
        dedup_in = Path(config.dedup.input)
        if not dedup_in.exists():
            raise PipelineError(f"dedup input {dedup_in} does not exist")
        stage_hash = _stage_hash(config.resolved()["dedup"] | {"seed": seed}, [dedup_in])

        def do_dedup():
            docs = []
            for line in dedup_in.read_text().splitlines():
                if not line.strip():
                    continue
                doc = json.loads(line)
                docs.append((doc["id"], doc["text"]))
            result = dedup_corpus(docs, mode=config.dedup.mode, seed=seed, ngram=config.dedup.ngram)
            _dump_json(run_dir / "dedup_report.json", result.to_report())
            kept = set(result.kept_ids)
            with open(run_dir / "dedup_kept.jsonl", "w") as fh:
                for doc_id, text in docs:
                    if doc_id in kept:
                        fh.write(json.dumps({"id": doc_id, "text": text}, sort_keys=True) + "\n")

        _execute(
            manifest, run_dir, "dedup", stage_hash,
            {"report": "dedup_report.json", "kept": "dedup_kept.jsonl"}, do_dedup,
        )

    lab_path = run_dir / "lab.npz"
    lab_hash = _stage_hash(config.resolved()["lab"] | {"seed": seed}, [])

    def do_lab():
        lab = toy_lab.make_domains(
            n_domains=lab_cfg.n_domains,
            d=lab_cfg.feature_dim,
            seed=seed,
            family=lab_cfg.family,
            examples_per_domain=lab_cfg.examples_per_domain,
            general_examples=lab_cfg.general_examples,
            benchmark_examples=lab_cfg.benchmark_examples,
            noise_std=lab_cfg.noise_std,
            own_std=lab_cfg.own_std,
            foreign_std=lab_cfg.foreign_std,
            shared_dims=lab_cfg.shared_dims,
            shared_target_std=lab_cfg.shared_target_std,
            own_target_std=lab_cfg.own_target_std,
            hidden_units=lab_cfg.hidden_units,
        )
        toy_lab.save_lab(lab, lab_path)

    _execute(manifest, run_dir, "lab", lab_hash, {"lab": "lab.npz"}, do_lab)
    lab = toy_lab.load_lab(lab_path)
    candidate_ids = [c.id for c in lab.candidates]

    components_hash = _stage_hash(
        config.resolved()["training"] | {"seed": seed, "family": lab_cfg.family}, [lab_path]
    )
    component_files = {"base": "base.dmxt"}
    for cid in candidate_ids:
        component_files[f"component_{cid}"] = f"component_{cid}.dmxt"

    def do_components():
        base, components = toy_lab.prepare_components(lab.candidates, lab.general, train_cfg)
        save_archive(base, run_dir / "base.dmxt")
        for cid, comp in zip(candidate_ids, components):
            save_archive(comp, run_dir / f"component_{cid}.dmxt")

    _execute(manifest, run_dir, "components", components_hash, component_files, do_components)
    base = load_archive(run_dir / "base.dmxt")
    components = [load_archive(run_dir / f"component_{cid}.dmxt") for cid in candidate_ids]
    component_paths = [run_dir / name for name in component_files.values()]

    merge_spec = MergeSpec(
        method=config.search.merge_method,
        seed=config.search.merge_seed,
    )

    if config.references.enabled:
        ref_hash = _stage_hash(
            config.resolved()["references"]
            | config.resolved()["training"]
            | {"seed": seed},
            [lab_path] + component_paths,
        )

        def do_references():
            ratios = mixture_search.sample_simplex(
                len(candidate_ids),
                config.references.count,
                int(np.random.SeedSequence([seed, 0xEF]).generate_state(1)[0]),
                candidate_ids=candidate_ids,
            )
            _dump_json(
                run_dir / "reference_ratios.json", [r.as_dict() for r in ratios]
            )
            table = toy_lab.build_reference_set(
                lab.candidates, lab.general, ratios, base, lab.tasks, train_cfg
            )
            write_score_csv(table, run_dir / "references.csv", run_dir / "domains.csv")

        _execute(
            manifest, run_dir, "references", ref_hash,
            {
                "ratios": "reference_ratios.json",
                "scores": "references.csv",
                "domains": "domains.csv",
            },
            do_references,
        )

        consistency_hash = _stage_hash(
            {"merge": config.search.merge_method, "merge_seed": config.search.merge_seed},
            [run_dir / "reference_ratios.json", run_dir / "references.csv"] + component_paths,
        )

        def do_consistency():
            ratio_dicts = json.loads((run_dir / "reference_ratios.json").read_text())
            ratios = [
                MixtureRatio(
                    weights=[rd[c] for c in candidate_ids], candidate_ids=candidate_ids
                )
                for rd in ratio_dicts
            ]
            reference = read_score_csv(run_dir / "references.csv", run_dir / "domains.csv")
            proxy = build_proxy_table(components, ratios, lab.tasks, merge_spec, base)
            write_score_csv(proxy, run_dir / "proxy_scores.csv")
            _dump_json(
                run_dir / "consistency.json", proxy_reference_consistency(reference, proxy)
            )

        _execute(
            manifest, run_dir, "consistency", consistency_hash,
            {"proxy_scores": "proxy_scores.csv", "consistency": "consistency.json"},
            do_consistency,
        )

    search_hash = _stage_hash(
        config.resolved()["search"] | {"seed": seed}, [lab_path] + component_paths
    )

    def do_search():
        plan = SamplePlan(
            per_iteration_counts=list(config.search.plan),
            final_candidate_pool=config.search.pool,
            top_k_average=config.search.top_k,
            rng_seed=seed,
        )
        predictor_config = PredictorConfig(
            learning_rate=config.search.gbdt_learning_rate,
            n_rounds=config.search.gbdt_rounds,
            max_depth=config.search.gbdt_max_depth,
            min_samples_leaf=config.search.gbdt_min_samples_leaf,
        )
        evaluator = ProxyEvaluator(components, lab.tasks, merge_spec, base)
        best, transcript = mixture_search.run_search(
            evaluator,
            candidate_ids,
            plan,
            predictor_config=predictor_config,
            benchmark_domains=lab.domain_of_benchmarks(),
        )
        (run_dir / "transcript.jsonl").write_text(transcript.to_jsonl())
        _dump_json(
            run_dir / "search_result.json",
            {
                "best_mixture": best.as_dict(),
                "evaluations": len(transcript.evaluations),
                "planned_evaluations": plan.total_evaluations(),
                "evaluator_calls": evaluator.calls,
                "fits": [
                    {"after_iteration": f.after_iteration, "n_observations": f.n_observations}
                    for f in transcript.fits
                ],
                "final_pool_size": transcript.final_pool_size,
                "final_top_k": transcript.final_top_k,
            },
        )

    _execute(
        manifest, run_dir, "search", search_hash,
        {"result": "search_result.json", "transcript": "transcript.jsonl"}, do_search,
    )

    report_inputs = [run_dir / "search_result.json", run_dir / "transcript.jsonl"]
    if config.references.enabled:
        report_inputs.append(run_dir / "consistency.json")
    report_hash = _stage_hash({"plan": config.search.plan}, report_inputs)

    def do_report():
        _dump_json(run_dir / "report.json", _build_report(config, run_dir))

    _execute(manifest, run_dir, "report", report_hash, {"report": "report.json"}, do_report)


def _build_report(config: ExperimentConfig, run_dir: Path) -> dict:
    search_result = json.loads((run_dir / "search_result.json").read_text())
    transcript_lines = [
        json.loads(line)
        for line in (run_dir / "transcript.jsonl").read_text().splitlines()
        if line.strip()
    ]
    per_iteration: dict[str, int] = {}
    for entry in transcript_lines:
        key = str(entry["iteration"])
        per_iteration[key] = per_iteration.get(key, 0) + 1
    report = {
        "experiment": {"name": config.name, "seed": config.seed},
        "optimal_mixture": search_result["best_mixture"],
        "proxy_budget": {
            "planned": search_result["planned_evaluations"],
            "used": search_result["evaluations"],
            "per_iteration": per_iteration,
        },
        "search": {
            "final_pool_size": search_result["final_pool_size"],
            "final_top_k": search_result["final_top_k"],
            "merge_method": config.search.merge_method,
        },
    }
    consistency_path = run_dir / "consistency.json"
    if consistency_path.exists():
        report["consistency"] = json.loads(consistency_path.read_text())
    return report


def load_report(manifest: ExperimentManifest) -> dict:
    """Read the machine-readable summary for a manifest's run."""
    stage = manifest.stages.get("report")
    if not stage or stage.get("status") != "done":
        raise PipelineError("report: pipeline has not completed the report stage")
    path = Path(manifest.run_dir) / stage["outputs"]["report"]
    return json.loads(path.read_text())


def format_report(report: dict) -> str:
    """Human-readable rendering of the machine summary."""
    lines = [f"experiment {report['experiment']['name']} (seed {report['experiment']['seed']})"]
    lines.append("optimal mixture:")
    for cid, w in sorted(report["optimal_mixture"].items()):
        lines.append(f"  {cid}: {w:.4f}")
    budget = report["proxy_budget"]
    lines.append(f"proxy evaluations: {budget['used']} used / {budget['planned']} planned")
    if "consistency" in report:
        cons = report["consistency"]
        lines.append(
            f"proxy consistency over {cons['n_models']} references: "
            f"macro rho {cons['macro_avg_rho']:.3f}, "
            f"mean capability recovery {cons['mean_capability_recovery']:.3f}"
        )
        for domain in sorted(cons["per_domain_rho"]):
            lines.append(f"  rho[{domain}] = {cons['per_domain_rho'][domain]:.3f}")
    return "\n".join(lines)
