"""`vivecap` command line: stage-by-stage pipeline with file hand-offs.

Every stage writes stably named artifacts into the configured output
directory and is idempotent for identical inputs. Exit codes: 0 success,
2 configuration problem, 3 stage failure.
"""

from __future__ import annotations

import json
import os
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import click

from . import core_model, embedding_sampler, grounded_metrics, reports, sft_export
from . import stats as stats_mod
from . import vlm_gateway
from .core_model import DatasetManifest, Frame, Roster
from .embedding_sampler import ClusteringParams, SampleManifest
from .sft_export import SplitSpec
from .vlm_gateway import CharacterSheet, EndpointConfig, SheetEntry, VlmClient


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    manifest_path: str | None
    roster_path: str | None
    sheet_path: str | None
    labels_path: str | None
    embeddings_path: str | None
    embeddings_format: str
    output_dir: str
    clustering: ClusteringParams
    split: SplitSpec
    checks: core_model.UniversalCheckConfig
    sample_seed: int
    sample_strategy: str
    endpoints: dict[str, EndpointConfig]


def _endpoint(section: dict) -> EndpointConfig:
    try:
        return EndpointConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad endpoint config: {exc}") from exc


def load_config(path, mock_endpoint: str | None = None,
                seed: int | None = None, output_dir: str | None = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    paths = doc.get("paths", {})
    sampling = doc.get("sampling", {})
    try:
        clustering = ClusteringParams(**doc.get("clustering", {}))
        split = SplitSpec(**doc.get("split", {}))
        checks = core_model.UniversalCheckConfig(**doc.get("checks", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    endpoints = {}
    for name, section in doc.get("endpoints", {}).items():
        if mock_endpoint:
            section = dict(section, base_url=mock_endpoint)
        endpoints[name] = _endpoint(section)
    cfg = RunConfig(
        manifest_path=paths.get("manifest"),
        roster_path=paths.get("roster"),
        sheet_path=paths.get("sheet"),
        labels_path=paths.get("labels"),
        embeddings_path=paths.get("embeddings"),
        embeddings_format=paths.get("embeddings_format", "jsonl"),
        output_dir=output_dir or paths.get("output_dir", "out"),
        clustering=clustering,
        split=split,
        checks=checks,
        sample_seed=seed if seed is not None else sampling.get("seed", 0),
        sample_strategy=sampling.get("strategy", "seeded_random"),
        endpoints=endpoints,
    )
    os.makedirs(cfg.output_dir, exist_ok=True)
    return cfg


def _require(value, what: str):
    if not value:
        raise ConfigError(f"config is missing {what}")
    if isinstance(value, str) and not os.path.exists(value):
        raise ConfigError(f"{what} does not exist: {value}")
    return value


def _load_roster(cfg: RunConfig) -> Roster:
    path = _require(cfg.roster_path, "paths.roster")
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return Roster(tuple(obj["names"]))


def _load_sheet(cfg: RunConfig) -> CharacterSheet:
    path = _require(cfg.sheet_path, "paths.sheet")
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return CharacterSheet(tuple(
        SheetEntry(name=e["name"], image_path=e["image_path"], description=e.get("description", ""))
        for e in obj["entries"]
    ))


def _load_frames(cfg: RunConfig) -> list[Frame]:
    path = _require(cfg.manifest_path, "paths.manifest")
    return core_model.load_frames_jsonl(path)


def _endpoint_for(cfg: RunConfig, name: str) -> EndpointConfig:
    if name not in cfg.endpoints:
        raise ConfigError(f"config is missing [endpoints.{name}]")
    return cfg.endpoints[name]


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.output_dir, name)


def _stage_frames(cfg: RunConfig) -> list[Frame]:
    """Frames for inference stages: the sampled subset when a sample
    manifest exists, the whole dataset otherwise."""
    frames = _load_frames(cfg)
    sample_path = _out(cfg, "sample.json")
    if os.path.exists(sample_path):
        with open(sample_path, encoding="utf-8") as fh:
            sample = SampleManifest.from_json(fh.read())
        wanted = set(sample.chosen.values())
        frames = [f for f in frames if f.id in wanted]
    return frames


def _append_errors(cfg: RunConfig, records: list[dict]) -> None:
    if not records:
        return
    with open(_out(cfg, "errors.jsonl"), "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@click.group()
@click.option("--config", "config_path", required=True, type=click.Path(), help="TOML run config.")
@click.option("--seed", type=int, default=None, help="Override the sampling seed.")
@click.option("--output-dir", default=None, type=click.Path(), help="Override the output directory.")
@click.option("--mock-endpoint", default=None, help="Route every endpoint at this base URL.")
@click.pass_context
def main(ctx, config_path, seed, output_dir, mock_endpoint):
    """Caption-quality pipeline: cluster, sample, detect, caption, judge,
    score, certify, export."""
    try:
        ctx.obj = load_config(config_path, mock_endpoint=mock_endpoint,
                              seed=seed, output_dir=output_dir)
    except ConfigError as exc:
        click.echo(json.dumps({"error": "config", "detail": str(exc)}), err=True)
        ctx.exit(2)


def _stage(fn):
    """Wrap a stage body with the exit-code contract."""
    def runner(cfg: RunConfig, *args, **kwargs):
        try:
            fn(cfg, *args, **kwargs)
        except ConfigError as exc:
            click.echo(json.dumps({"error": "config", "detail": str(exc)}), err=True)
            sys.exit(2)
        except Exception as exc:
            click.echo(json.dumps({"error": "stage", "detail": str(exc)}), err=True)
            sys.exit(3)
    return runner


@main.command()
@click.pass_obj
def cluster(cfg):
    """Cluster precomputed embeddings; writes cluster.json."""
    @_stage
    def body(cfg):
        path = _require(cfg.embeddings_path, "paths.embeddings")
        emb = embedding_sampler.load_embeddings(path, cfg.embeddings_format)
        assignment = embedding_sampler.hdbscan_cluster(emb, cfg.clustering)
        obj = {
            "n_clusters": assignment.n_clusters,
            "labels": {fid: int(lab) for fid, lab in zip(emb.ids, assignment.labels)},
            "stabilities": {
                str(cid): assignment.stabilities[cid] for cid in sorted(assignment.stabilities)
            },
        }
        with open(_out(cfg, "cluster.json"), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
        click.echo(f"clusters: {assignment.n_clusters}")
    body(cfg)


@main.command()
@click.pass_obj
def sample(cfg):
    """Draw one frame per cluster; writes sample.json."""
    @_stage
    def body(cfg):
        path = _require(cfg.embeddings_path, "paths.embeddings")
        emb = embedding_sampler.load_embeddings(path, cfg.embeddings_format)
        with open(_out(cfg, "cluster.json"), encoding="utf-8") as fh:
            obj = json.load(fh)
        import numpy as np

        labels = np.array([obj["labels"][fid] for fid in emb.ids], dtype=np.int64)
        assignment = embedding_sampler.ClusterAssignment(
            labels=labels, n_clusters=obj["n_clusters"],
            stabilities={int(k): v for k, v in obj["stabilities"].items()},
        )
        manifest = embedding_sampler.stratified_sample(
            emb, assignment, strategy=cfg.sample_strategy, seed=cfg.sample_seed
        )
        with open(_out(cfg, "sample.json"), "w", encoding="utf-8") as fh:
            fh.write(manifest.to_json())
        share = 100.0 * len(manifest.chosen) / emb.n
        click.echo(f"sampled {len(manifest.chosen)} of {emb.n} frames ({share:.2f}%)")
    body(cfg)


@main.command()
@click.pass_obj
def detect(cfg):
    """Run character detection; writes detections.jsonl."""
    @_stage
    def body(cfg):
        roster = _load_roster(cfg)
        sheet = _load_sheet(cfg)
        endpoint = _endpoint_for(cfg, "detector")
        frames = _stage_frames(cfg)
        client = VlmClient()

        def one(frame):
            raw = None
            try:
                bundle = vlm_gateway.build_detect_prompt(sheet, roster, frame)
                raw = client.complete(endpoint, bundle)
                detection = vlm_gateway.parse_detection(raw, roster)
                return frame, detection, None
            except Exception as exc:
                return frame, None, {"frame_id": frame.id, "stage": "detect",
                                     "error": str(exc), **({"raw": raw} if raw else {})}

        with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
            results = list(pool.map(one, frames))
        errors = []
        with open(_out(cfg, "detections.jsonl"), "w", encoding="utf-8") as fh:
            for frame, detection, err in results:
                if err is not None:
                    errors.append(err)
                    continue
                fh.write(json.dumps(
                    {"frame_id": frame.id, "characters": sorted(detection.names)},
                    ensure_ascii=False) + "\n")
        _append_errors(cfg, errors)
        click.echo(f"detected on {len(results) - len(errors)}/{len(results)} frames")
    body(cfg)


@main.command()
@click.pass_obj
def caption(cfg):
    """Caption frames with detected characters as context; writes captions.jsonl."""
    @_stage
    def body(cfg):
        sheet = _load_sheet(cfg)
        endpoint = _endpoint_for(cfg, "captioner")
        frames = {f.id: f for f in _stage_frames(cfg)}
        detections = []
        with open(_out(cfg, "detections.jsonl"), encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    detections.append(json.loads(line))
        client = VlmClient()

        def one(rec):
            frame = frames[rec["frame_id"]]
            raw = None
            try:
                subset = sheet.subset(rec["characters"])
                bundle = vlm_gateway.build_caption_prompt(subset, frame)
                raw = client.complete(endpoint, bundle)
                parsed = core_model.parse_structured_caption(raw)
                return frame, parsed, raw, None
            except Exception as exc:
                return frame, None, raw, {"frame_id": frame.id, "stage": "caption",
                                          "error": str(exc), **({"raw": raw} if raw else {})}

        with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
            results = list(pool.map(one, detections))
        errors = []
        with open(_out(cfg, "captions.jsonl"), "w", encoding="utf-8") as fh:
            for frame, parsed, raw, err in results:
                if err is not None:
                    errors.append(err)
                    continue
                rec = {
                    "frame_id": frame.id,
                    "caption": json.loads(core_model.serialize_caption(parsed)),
                    "raw": raw,
                }
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        _append_errors(cfg, errors)
        click.echo(f"captioned {len(results) - len(errors)}/{len(results)} frames")
    body(cfg)


@main.command()
@click.option("--input", "input_name", default="captions.jsonl", show_default=True)
@click.option("--output", "output_name", default="scorecards.jsonl", show_default=True)
@click.pass_obj
def judge(cfg, input_name, output_name):
    """Score image-caption pairs with the judge rubric."""
    @_stage
    def body(cfg):
        sheet = _load_sheet(cfg)
        endpoint = _endpoint_for(cfg, "judge")
        frames = {f.id: f for f in _load_frames(cfg)}
        pairs = []
        with open(_out(cfg, input_name), encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                parsed = core_model.parse_structured_caption(json.dumps(rec["caption"]))
                pairs.append((frames[rec["frame_id"]], parsed))
        results = vlm_gateway.run_judge(endpoint, sheet, pairs, client=VlmClient())
        errors = []
        with open(_out(cfg, output_name), "w", encoding="utf-8") as fh:
            for res in results:
                if not res.ok:
                    errors.append(res.error_record())
                    continue
                rec = {"frame_id": res.frame.id, **res.scorecard.as_dict()}
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        _append_errors(cfg, errors)
        click.echo(f"judged {len(results) - len(errors)}/{len(results)} pairs")
    body(cfg)


@main.command()
@click.pass_obj
def metrics(cfg):
    """Score detections against gold labels; writes grounded.json/.csv."""
    @_stage
    def body(cfg):
        roster = _load_roster(cfg)
        labels_path = _require(cfg.labels_path, "paths.labels")
        labels = core_model.load_labels_jsonl(labels_path)
        predictions = {}
        with open(_out(cfg, "detections.jsonl"), encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    predictions[rec["frame_id"]] = rec["characters"]
        frames = [f for f in _load_frames(cfg) if f.id in predictions]
        manifest = DatasetManifest(
            frames=frames,
            labels={fid: lab for fid, lab in labels.items() if fid in predictions},
        )
        agg, rows = grounded_metrics.evaluate_dataset(manifest, predictions, roster=roster)
        with open(_out(cfg, "grounded.json"), "w", encoding="utf-8") as fh:
            fh.write(grounded_metrics.report_json(agg, rows))
        with open(_out(cfg, "grounded.csv"), "w", encoding="utf-8") as fh:
            fh.write(grounded_metrics.report_csv(agg, rows))
        click.echo(f"macro_f1={agg.macro_f1:.4f} mean_mistakes={agg.mean_mistakes:.4f}")
    body(cfg)


def _load_scorecards(path) -> dict[str, dict[str, float]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[rec["frame_id"]] = rec
    return out


@main.command()
@click.option("--before", "before_name", required=True, help="Scorecards file (baseline).")
@click.option("--after", "after_name", required=True, help="Scorecards file (improved).")
@click.option("--alpha", default=0.05, show_default=True)
@click.pass_obj
def stats(cfg, before_name, after_name, alpha):
    """Paired right-tailed t-tests over the five judge axes; writes stats.csv/.json."""
    @_stage
    def body(cfg):
        before = _load_scorecards(_out(cfg, before_name))
        after = _load_scorecards(_out(cfg, after_name))
        shared = sorted(set(before) & set(after))
        axes = ("overall", "salient_objects", "characters", "background", "scene")
        results = {}
        for axis in axes:
            samples = stats_mod.PairedSamples(
                before=tuple(float(before[fid][axis]) for fid in shared),
                after=tuple(float(after[fid][axis]) for fid in shared),
                label=axis,
            )
            results[axis] = stats_mod.paired_t_test(samples)
        policy = stats_mod.CorrectionPolicy(alpha=alpha, m_tests=len(axes))
        rows = stats_mod.significance_report(results, policy)
        with open(_out(cfg, "stats.csv"), "w", encoding="utf-8") as fh:
            fh.write(stats_mod.report_csv(rows))
        with open(_out(cfg, "stats.json"), "w", encoding="utf-8") as fh:
            fh.write(stats_mod.report_json(rows))
        click.echo(f"threshold={stats_mod.bonferroni_threshold(policy):.4g} n_pairs={len(shared)}")
    body(cfg)


@main.command("export-sft")
@click.pass_obj
def export_sft(cfg):
    """Split the gold set and export detector finetuning conversations."""
    @_stage
    def body(cfg):
        roster = _load_roster(cfg)
        sheet = _load_sheet(cfg)
        labels_path = _require(cfg.labels_path, "paths.labels")
        labels = core_model.load_labels_jsonl(labels_path)
        frames = {f.id: f for f in _load_frames(cfg)}
        ids = sorted(fid for fid in labels if fid in frames)
        train_ids, test_ids = sft_export.split_dataset(ids, cfg.split)
        for name, subset in (("sft_train.jsonl", train_ids), ("sft_test.jsonl", test_ids)):
            examples = [
                sft_export.build_sft_example(frames[fid], labels[fid], sheet, roster)
                for fid in subset
            ]
            sft_export.export_sft_jsonl(examples, _out(cfg, name))
        click.echo(f"exported {len(train_ids)} train / {len(test_ids)} test examples")
    body(cfg)


@main.command()
@click.option("--scorecards", "scorecard_specs", multiple=True,
              help="variant=path pairs (paths relative to output dir).")
@click.pass_obj
def report(cfg, scorecard_specs):
    """Emit aggregate tables, radar SVG, and character-distribution data."""
    @_stage
    def body(cfg):
        judged = {}
        for spec in scorecard_specs:
            if "=" not in spec:
                raise ConfigError(f"--scorecards expects variant=path, got {spec!r}")
            variant, path = spec.split("=", 1)
            cards = _load_scorecards(_out(cfg, path))
            if not cards:
                raise ValueError(f"no scorecards in {path}")
            judged[variant] = {
                axis: sum(rec[axis] for rec in cards.values()) / len(cards)
                for axis in reports.RADAR_AXES
            }
        grounded = None
        grounded_path = _out(cfg, "grounded.json")
        if os.path.exists(grounded_path):
            with open(grounded_path, encoding="utf-8") as fh:
                obj = json.load(fh)["aggregate"]
            grounded = {"run": grounded_metrics.AggregateGroundedMetrics(**obj)}
        reports.emit_aggregate_tables(
            grounded, judged or None,
            md_path=_out(cfg, "tables.md"), csv_path=_out(cfg, "judged.csv"),
        )
        if judged:
            data = reports.RadarData(tuple(
                (variant, {axis: max(1.0, min(10.0, scores[axis])) for axis in reports.RADAR_AXES})
                for variant, scores in judged.items()
            ))
            reports.emit_radar_svg(data, _out(cfg, "radar.svg"))
        sample_path = _out(cfg, "sample.json")
        if cfg.labels_path and os.path.exists(cfg.labels_path) and os.path.exists(sample_path):
            labels = core_model.load_labels_jsonl(cfg.labels_path)
            with open(sample_path, encoding="utf-8") as fh:
                manifest = SampleManifest.from_json(fh.read())
            dist = embedding_sampler.character_distribution(labels, manifest)
            reports.emit_distribution_chart_data(dist, _out(cfg, "distribution.json"))
        click.echo("report artifacts written")
    body(cfg)


if __name__ == "__main__":
    main()
