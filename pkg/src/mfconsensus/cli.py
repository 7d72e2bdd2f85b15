"""Command-line entry points. Every subcommand reads files, writes its outputs
and a ``<out>.manifest.json`` run record next to the main output."""

from __future__ import annotations

import hashlib
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import click

from . import __version__
from .agreement import agreement_csv, icc_2_1, mitotic_count_matrix, study_raters, threshold_sweep
from .consensus import (
    DEFAULT_MIN_RATERS,
    DEFAULT_RADIUS_UM,
    ConsensusConfig,
    build_consensus,
    dump_consensus,
    parse_consensus,
)
from .core import (
    LabelFilter,
    Point,
    _load_json,
    dumps,
    filter_labels,
    image_index,
    parse_annotations,
    parse_detections,
    parse_images,
)
from .detection import EvalConfig, GroundTruth, evaluate_many
from .errors import ConfigError, InputError, MFError, NumericalCheckError, SchemaError
from .fusion import FusionWeights, feature_map, gradient_check
from .sim import (
    StudyPreset,
    get_preset,
    monte_carlo_splits,
    patch_sampling_plan,
    patches_csv,
    simulate_study,
    splits_json,
    study_images,
)

DEFAULT_LABELS = "he_and_phh3,he_only"
OUT = click.Path(dir_okay=False, writable=True)
IN = click.Path(exists=True, dir_okay=False)
POOLING = "tp/fp/fn summed over images per rater"


class Run:
    """Collects input and output digests and writes the run manifest."""

    def __init__(self, subcommand: str, config: dict, seed: int | None = None):
        self.subcommand = subcommand
        self.config = config
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def read(self, path) -> bytes:
        data = Path(path).read_bytes()
        self.inputs[str(path)] = hashlib.sha256(data).hexdigest()
        return data

    def write(self, path, data: bytes | str) -> None:
        if isinstance(data, str):
            data = data.encode("utf-8")
        Path(path).write_bytes(data)
        self.outputs[str(path)] = hashlib.sha256(data).hexdigest()

    def finish(self, out) -> None:
        manifest = {
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": __version__,
            "seed": self.seed,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        Path(f"{out}.manifest.json").write_bytes(dumps(manifest))


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except MFError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            ctx.exit(exc.exit_code)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(InputError.exit_code)


def _labels(text: str) -> LabelFilter:
    try:
        return LabelFilter.parse(text)
    except SchemaError as exc:
        raise ConfigError(str(exc)) from None


def _consensus_config(radius_um, min_raters, labels) -> ConsensusConfig:
    # validated here rather than by click so that bad values exit with the config code
    return ConsensusConfig(radius_um, min_raters, _labels(labels))


def radius_option(f):
    return click.option(
        "--radius-um", type=float, default=DEFAULT_RADIUS_UM, show_default=True, help="Clustering radius in micrometers."
    )(f)


def consensus_options(f):
    f = click.option(
        "--labels", default=DEFAULT_LABELS, show_default=True, help="Comma separated labels that count as MFs."
    )(f)
    f = click.option(
        "--min-raters", type=int, default=DEFAULT_MIN_RATERS, show_default=True, help="Distinct raters needed."
    )(f)
    return radius_option(f)


@click.group(cls=_Group)
@click.version_option(__version__)
def cli():
    """Multi-rater MF consensus, agreement, evaluation and simulation tools."""


@cli.command("consensus")
@click.option("--annotations", type=IN, required=True)
@consensus_options
@click.option("--out", type=OUT, required=True)
def cmd_consensus(annotations, radius_um, min_raters, labels, out):
    """Cluster annotations and keep clusters backed by enough raters."""
    config = _consensus_config(radius_um, min_raters, labels)
    run = Run("consensus", config.to_dict())
    images, anns = parse_annotations(run.read(annotations))
    cs = build_consensus(anns, image_index(images), config)
    run.write(out, dump_consensus(cs, images))
    run.finish(out)


def _sweep_rows(run, annotations, config, t_min, t_max, match_radius_um):
    images, anns = parse_annotations(run.read(annotations))
    return threshold_sweep(
        anns,
        image_index(images),
        config,
        t_min,
        t_max,
        raters=study_raters(anns),
        match_radius_um=match_radius_um,
    )


@cli.command("agreement")
@click.option("--annotations", type=IN, required=True)
@consensus_options
@click.option("--match-radius-um", type=float, default=None, help="Matching radius; defaults to --radius-um.")
@click.option("--phase-tag", default="", help="Free text copied into every row.")
@click.option("--out", type=OUT, required=True)
def cmd_agreement(annotations, radius_um, min_raters, labels, match_radius_um, phase_tag, out):
    """Precision, recall and F1 of each rater against the consensus of the others."""
    config = _consensus_config(radius_um, min_raters, labels)
    run = Run(
        "agreement",
        {**config.to_dict(), "match_radius_um": match_radius_um, "phase_tag": phase_tag, "pooling": POOLING},
    )
    rows = _sweep_rows(run, annotations, config, min_raters, min_raters, match_radius_um)
    run.write(out, agreement_csv(rows, phase_tag))
    run.finish(out)


@cli.command("sweep")
@click.option("--annotations", type=IN, required=True)
@radius_option
@click.option("--labels", default=DEFAULT_LABELS, show_default=True)
@click.option("--t-min", type=int, default=2, show_default=True)
@click.option("--t-max", type=int, default=7, show_default=True)
@click.option("--match-radius-um", type=float, default=None)
@click.option("--phase-tag", default="")
@click.option("--out", type=OUT, required=True)
def cmd_sweep(annotations, radius_um, labels, t_min, t_max, match_radius_um, phase_tag, out):
    """Leave-one-out agreement for every consensus threshold in t-min..t-max."""
    config = _consensus_config(radius_um, DEFAULT_MIN_RATERS, labels)
    run = Run(
        "sweep",
        {"radius_um": radius_um, "labels": config.label_filter.to_list(), "t_min": t_min, "t_max": t_max,
         "match_radius_um": match_radius_um, "phase_tag": phase_tag, "pooling": POOLING},
    )
    rows = _sweep_rows(run, annotations, config, t_min, t_max, match_radius_um)
    run.write(out, agreement_csv(rows, phase_tag))
    run.finish(out)


@cli.command("icc")
@click.option("--annotations", type=IN, required=True)
@click.option("--labels", default=DEFAULT_LABELS, show_default=True)
@click.option("--out", type=OUT, required=True)
def cmd_icc(annotations, labels, out):
    """ICC(2,1) of per-image mitotic counts across raters."""
    label_filter = _labels(labels)
    run = Run("icc", {"labels": label_filter.to_list()})
    images, anns = parse_annotations(run.read(annotations))
    matrix = mitotic_count_matrix(
        filter_labels(anns, label_filter), [im.image_id for im in images], study_raters(anns)
    )
    doc = icc_2_1(matrix).to_dict()
    doc["image_ids"] = list(matrix.image_ids)
    doc["rater_ids"] = list(matrix.rater_ids)
    doc["counts"] = matrix.counts.tolist()
    run.write(out, dumps(doc))
    run.finish(out)


def _load_ground_truth(data: bytes, label_filter: LabelFilter, images: dict):
    """Ground truth from a consensus, annotation or detection document."""
    doc = _load_json(data)
    if isinstance(doc, dict) and "entries" in doc:
        ims, cs = parse_consensus(data)
        return ims, GroundTruth.from_consensus(cs)
    if isinstance(doc, dict) and "annotations" in doc:
        ims, anns = parse_annotations(data)
        return ims, GroundTruth.from_annotations(anns, [im.image_id for im in ims], label_filter)
    if isinstance(doc, dict) and "detections" in doc:
        if not images:
            raise SchemaError("a detection file used as ground truth needs --images")
        dets = parse_detections(data, images)
        return [], GroundTruth(tuple(Point(d.image_id, d.x_px, d.y_px) for d in dets), frozenset(images))
    raise SchemaError("ground truth must be a consensus, annotation or detection document")


@cli.command("eval")
@click.option("--detections", type=IN, required=True)
@click.option(
    "--ground-truth",
    "ground_truths",
    multiple=True,
    required=True,
    help="NAME=PATH (repeatable); a bare PATH is named after the file stem.",
)
@click.option("--images", "images_path", type=IN, default=None, help="Any document with an 'images' list.")
@radius_option
@click.option("--labels", default=DEFAULT_LABELS, show_default=True, help="Labels kept from annotation ground truth.")
@click.option("--min-confidence", type=float, default=0.0, show_default=True)
@click.option("--out", type=OUT, required=True)
def cmd_eval(detections, ground_truths, images_path, radius_um, labels, min_confidence, out):
    """AP, best F1 and the PR curve of detections against one or more ground truths."""
    config = EvalConfig(radius_um, _labels(labels), min_confidence)
    run = Run("eval", config.to_dict())
    images = {}
    if images_path is not None:
        doc = _load_json(run.read(images_path))
        if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
            raise SchemaError("--images file has no 'images' list")
        images = image_index(parse_images(doc["images"]))
    named = []
    for spec in ground_truths:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        if not Path(path).is_file():
            raise InputError(f"ground truth file not found: {path}")
        named.append((name, path))
    if len({n for n, _ in named}) != len(named):
        raise ConfigError("ground truth names must be unique")
    gts = {}
    for name, path in named:
        ims, gt = _load_ground_truth(run.read(path), config.label_filter, images)
        for im in ims:
            images.setdefault(im.image_id, im)
        gts[name] = gt
    dets = parse_detections(run.read(detections), images)
    results = evaluate_many(dets, gts, images, config)
    doc = {
        "config": config.to_dict(),
        "results": {name: res.to_dict() for name, res in results.items()},
    }
    run.write(out, dumps(doc))
    run.finish(out)


@cli.command("simulate")
@click.option("--preset", default="P2", show_default=True, help="Built-in preset name (P1 or P2).")
@click.option("--preset-file", type=IN, default=None, help="JSON preset; overrides --preset.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n-images", type=int, default=20, show_default=True)
@click.option("--area-mm2", type=float, default=2.37, show_default=True)
@click.option("--mpp", type=float, default=0.25, show_default=True)
@radius_option
@click.option("--truth-out", type=OUT, default=None, help="Also write the simulated ground truth here.")
@click.option("--out", type=OUT, required=True)
def cmd_simulate(preset, preset_file, seed, n_images, area_mm2, mpp, radius_um, truth_out, out):
    """Simulate a multi-rater annotation study."""
    run = Run("simulate", {}, seed)
    if preset_file is not None:
        doc = _load_json(run.read(preset_file))
        chosen = StudyPreset.from_dict(doc)
    else:
        chosen = get_preset(preset)
    chosen = chosen.with_seed(seed)
    if n_images < 1 or not area_mm2 > 0:
        raise ConfigError("need at least one image with positive area")
    run.config = {
        "preset": chosen.to_dict(),
        "n_images": n_images,
        "area_mm2": area_mm2,
        "mpp": mpp,
        "radius_um": radius_um,
    }
    study = simulate_study(chosen, study_images(n_images, area_mm2, mpp), radius_um)
    run.write(out, study.annotation_bytes())
    if truth_out is not None:
        run.write(truth_out, study.truth_bytes())
    run.finish(out)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.replace("/", ",").split(",")
    try:
        ratios = tuple(float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad ratios {text!r}") from None
    if len(ratios) != 3:
        raise ConfigError("ratios need three values train/val/test")
    return ratios


@cli.command("splits")
@click.option("--cases", type=IN, required=True, help="Text file with one case id per line.")
@click.option("--ratios", default="0.70/0.15/0.15", show_default=True, help="train/val/test fractions.")
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=OUT, required=True)
def cmd_splits(cases, ratios, folds, seed, out):
    """Monte Carlo train/val/test partitions of the case list."""
    ratios = _parse_ratios(ratios)
    run = Run("splits", {"ratios": list(ratios), "folds": folds}, seed)
    try:
        text = run.read(cases).decode("utf-8")
    except UnicodeDecodeError:
        raise SchemaError("case list is not UTF-8") from None
    ids = [line.strip() for line in text.splitlines() if line.strip()]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate case ids")
    run.write(out, splits_json(monte_carlo_splits(ids, ratios, folds, seed)))
    run.finish(out)


@cli.command("patches")
@click.option("--ground-truth", "ground_truth", type=IN, required=True, help="Consensus or annotation file.")
@click.option("--labels", default=DEFAULT_LABELS, show_default=True)
@click.option("--patch-size", type=int, default=512, show_default=True, help="Patch side in pixels.")
@click.option("--mf-fraction", type=float, default=0.5, show_default=True, help="Minimum share of MF patches.")
@click.option("--n-patches", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=OUT, required=True)
def cmd_patches(ground_truth, labels, patch_size, mf_fraction, n_patches, seed, out):
    """Plan training patches, a minimum share of them centred near an MF."""
    label_filter = _labels(labels)
    run = Run(
        "patches",
        {"labels": label_filter.to_list(), "patch_size": patch_size, "mf_fraction": mf_fraction,
         "n_patches": n_patches},
        seed,
    )
    data = run.read(ground_truth)
    images, gt = _load_ground_truth(data, label_filter, {})
    plan = patch_sampling_plan(images, gt.points, patch_size, mf_fraction, n_patches, seed)
    run.write(out, patches_csv(plan))
    run.finish(out)


def _fixture(name: str) -> Path:
    return Path(str(resources.files("mfconsensus") / "data" / name))


@cli.command("fuse-check")
@click.option("--weights", type=IN, default=None, help="Weight JSON; defaults to the bundled fixture.")
@click.option("--features", type=IN, default=None, help="Feature JSON; defaults to the bundled fixture.")
@click.option("--step", type=float, default=1e-6, show_default=True, help="Central difference step.")
@click.option("--tolerance", type=float, default=1e-6, show_default=True, help="Maximum relative error.")
@click.option("--out", type=OUT, required=True)
def cmd_fuse_check(weights, features, step, tolerance, out):
    """Forward and backward pass of the fusion block with a finite-difference check.

    Exits 4 when any gradient's relative error exceeds the tolerance.
    """
    weights = weights or _fixture("fuse_weights.json")
    features = features or _fixture("fuse_features.json")
    if not step > 0 or not tolerance > 0:
        raise ConfigError("step and tolerance must be positive")
    run = Run("fuse-check", {"step": step, "tolerance": tolerance})
    wts = FusionWeights.from_dict(_load_json(run.read(weights)))
    doc = _load_json(run.read(features))
    if not isinstance(doc, dict) or not {"c", "h", "w", "h_map", "p_map"} <= set(doc):
        raise SchemaError("feature file needs c, h, w, h_map and p_map")
    c, h, w = doc["c"], doc["h"], doc["w"]
    if not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in (c, h, w)):
        raise SchemaError("c, h and w must be positive integers")
    hm = feature_map(doc["h_map"], c, h, w)
    pm = feature_map(doc["p_map"], c, h, w)
    up = feature_map(doc["upstream"], c, h, w) if "upstream" in doc else feature_map([1.0] * (c * h * w), c, h, w)
    errors = gradient_check(hm, pm, wts, up, step)
    worst = max(errors.values())
    report = {"relative_errors": errors, "max_relative_error": worst, "tolerance": tolerance, "passed": worst < tolerance}
    run.write(out, dumps(report))
    run.finish(out)
    click.echo(f"max relative error {worst:.3e}")
    if not worst < tolerance:
        raise NumericalCheckError(f"gradient check failed: {worst:.3e} >= {tolerance:.1e}")


def main(argv=None):
    cli.main(args=argv, prog_name="mfconsensus")


if __name__ == "__main__":
    main()
