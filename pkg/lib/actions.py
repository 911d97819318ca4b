import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from lib.base_stage import StageError, StageRunner
from lib.evaluation import (
    EvaluationError,
    cloud_to_cloud_ground_truth,
    export_indicator_constraints,
    mesh_to_cloud_ground_truth,
    region_accuracy,
    write_indicator_constraints,
)
from lib.geometry import (
    identity_ground_truth,
    load_ground_truth,
    load_shape,
    sample_point_cloud,
)
from lib.graph_matching import match_graphs
from lib.mesh_io import (
    ShapeFormatError,
    ShapeIOError,
    ShapeValidationError,
    read_index_file,
    write_index_file,
    write_xyz,
)
from lib.report_builder import (
    ReportBuilder,
    ReportError,
    read_report,
    write_artifacts,
    write_report,
)
from lib.segmentation import KSelection, align_ranks, select_k
from lib.spectral import compute_descriptors
from lib.symmetry import break_symmetry
from optypes.match_types import (
    CorrespondenceReport,
    DescriptorField,
    GroundTruthMap,
    MatchMode,
    OneToOneMatching,
    PipelineConfig,
    SelfPairKind,
    SelfSymmetryEntry,
    Shape,
    ShapeKind,
    SweepConfig,
    SweepMode,
    SymmetricMatching,
)
from util.sweep_runner import MeshPair, SweepCell, SweepRunner, SweepTrial
from util.synthetic import BUILTIN_PREFIX, builtin_vertex_map, load_builtin

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
SECOND_CLOUD_SEED_OFFSET = 1_000_003
SWEEP_COLUMNS = ["mode", "points", "noise", "mean_accuracy", "std", "trials"]
INPUT_ERRORS = (ShapeIOError, ReportError, EvaluationError, ValidationError)


class ActionError(Exception):
    """Base exception for action-level errors"""
    pass


class InputError(ActionError):
    """Raised when inputs (files, parameters) are unreadable or invalid"""
    pass


class PipelineError(ActionError):
    """Raised when a pipeline stage fails on valid input"""
    pass


def _wrap(e: Exception, what: str) -> ActionError:
    cause = e.cause if isinstance(e, StageError) else e
    if isinstance(cause, INPUT_ERRORS):
        return InputError(f"{what}: {e}")
    return PipelineError(f"{what}: {e}")


@dataclass
class PipelineResult:
    report: CorrespondenceReport
    shape_a: Shape
    shape_b: Shape
    selection: KSelection
    symmetric: SymmetricMatching
    one_to_one: Optional[OneToOneMatching] = None
    descriptors: Dict[str, DescriptorField] = field(default_factory=dict)


@dataclass(frozen=True)
class _SweepInput:
    mesh_a: Shape
    mesh_b: Shape
    vertex_map: GroundTruthMap


def load_input(source: str, knn: int) -> Shape:
    if source.startswith(BUILTIN_PREFIX):
        return load_builtin(source)
    return load_shape(source, k=knn)


def self_symmetry_entries(sym: SymmetricMatching) -> List[SelfSymmetryEntry]:
    """Per node: its partners, with unmatched nodes assigned to themselves."""
    entries = []
    for node in range(sym.n_a):
        partners = sorted(sym.match_set(node))
        if not partners:
            entries.append(SelfSymmetryEntry(node=node, partners=[node], kind=SelfPairKind.FALLBACK))
        elif partners == [node]:
            entries.append(SelfSymmetryEntry(node=node, partners=partners, kind=SelfPairKind.SELF))
        else:
            entries.append(SelfSymmetryEntry(node=node, partners=partners, kind=SelfPairKind.SYMMETRIC))
    return entries


class CorrespondencePipeline:
    """load -> HKS -> align -> select_k -> match_graphs -> break_symmetry -> evaluate"""

    def __init__(self, config: PipelineConfig):
        self.config = config

    def _metadata(self, builder: ReportBuilder, shape_a: Shape, shape_b: Shape) -> None:
        builder.metadata(
            kind_a=shape_a.kind.value,
            kind_b=shape_b.kind.value,
            n_vertices_a=shape_a.n_vertices,
            n_vertices_b=shape_b.n_vertices,
            nnz_floor=self.config.matching.nnz_floor,
        )

    def _accuracy(
        self,
        labels_a: np.ndarray,
        labels_b: np.ndarray,
        matching: Union[SymmetricMatching, OneToOneMatching],
        gt: GroundTruthMap,
        areas_a: np.ndarray,
        mask: Optional[np.ndarray],
    ) -> float:
        return region_accuracy(
            labels_a,
            labels_b,
            matching,
            gt,
            areas_a,
            exclude_unmatched=self.config.evaluation.exclude_unmatched,
            mask=mask,
        )

    def match(
        self,
        shape_a: Shape,
        shape_b: Shape,
        runner: Optional[StageRunner] = None,
        gt: Optional[GroundTruthMap] = None,
        gt_mask: Optional[np.ndarray] = None,
    ) -> PipelineResult:
        runner = runner or StageRunner("match")
        cfg = self.config
        desc_a = runner.run("descriptors", compute_descriptors, shape_a, cfg.descriptors)
        desc_b = runner.run("descriptors", compute_descriptors, shape_b, cfg.descriptors)
        aligned_b = runner.run(
            "alignment", align_ranks, desc_a, shape_a.vertex_area, desc_b, shape_b.vertex_area
        )
        selection = runner.run(
            "segmentation", select_k, shape_a, shape_b, desc_a, aligned_b, cfg.segmentation, cfg.workers
        )
        sym = runner.run("matching", match_graphs, selection.graph_a, selection.graph_b, cfg.matching)
        one = None
        if not cfg.symmetric_only:
            one = runner.run(
                "symmetry_breaking",
                break_symmetry,
                selection.graph_a,
                selection.graph_b,
                sym,
                shape_a,
                shape_b,
            )

        accuracy, one_accuracy = None, None
        if gt is not None:
            labels_a = selection.graph_a.vertex_to_node
            labels_b = selection.graph_b.vertex_to_node
            accuracy = runner.run(
                "evaluation", self._accuracy, labels_a, labels_b, sym, gt, shape_a.vertex_area, gt_mask
            )
            if one is not None:
                one_accuracy = runner.run(
                    "evaluation", self._accuracy, labels_a, labels_b, one, gt, shape_a.vertex_area, gt_mask
                )

        builder = (
            ReportBuilder("match", shape_a.source or "")
            .shape_b(shape_b.source)
            .parameters(cfg)
            .segmentation(
                selection.k, selection.distances, selection.graph_a, shape_a, selection.graph_b, shape_b
            )
            .symmetric(sym)
            .one_to_one(one)
            .accuracy(accuracy, one_accuracy)
        )
        self._metadata(builder, shape_a, shape_b)
        report = builder.timings(runner.timings, runner.total_time).build()
        return PipelineResult(
            report, shape_a, shape_b, selection, sym, one, {"a": desc_a, "b": aligned_b}
        )

    def self_symmetry(self, shape: Shape, runner: Optional[StageRunner] = None) -> PipelineResult:
        runner = runner or StageRunner("self")
        cfg = self.config
        desc = runner.run("descriptors", compute_descriptors, shape, cfg.descriptors)
        selection = runner.run(
            "segmentation", select_k, shape, shape, desc, desc, cfg.segmentation, cfg.workers
        )
        graph = selection.graph_a
        sym = runner.run("matching", match_graphs, graph, graph, cfg.matching)
        entries = self_symmetry_entries(sym)
        n_symmetric = sum(e.kind is SelfPairKind.SYMMETRIC for e in entries)
        logger.info(f"Self-symmetry: {n_symmetric} of {graph.n_nodes} nodes in symmetric groups")

        builder = (
            ReportBuilder("self", shape.source or "")
            .shape_b(None)
            .parameters(cfg)
            .segmentation(selection.k, selection.distances, graph, shape, graph, shape)
            .symmetric(sym)
            .self_symmetry(entries)
        )
        self._metadata(builder, shape, shape)
        report = builder.timings(runner.timings, runner.total_time).build()
        return PipelineResult(report, shape, shape, selection, sym, None, {"a": desc})


class Actions:
    def __init__(self, config: Optional[PipelineConfig] = None, testing: bool = False) -> None:
        self.config = config or PipelineConfig()
        self.testing = testing
        self.pipeline = CorrespondencePipeline(self.config)

    def _ground_truth(
        self,
        shape_a: Shape,
        n_target: int,
        gt_path: Optional[PathLike],
        gt_nearest_path: Optional[PathLike],
    ) -> Tuple[Optional[GroundTruthMap], Optional[np.ndarray]]:
        if gt_path is not None:
            return load_ground_truth(gt_path, shape_a.n_vertices, n_target), None
        if gt_nearest_path is not None:
            nearest = read_index_file(gt_nearest_path)
            if len(nearest) != n_target or nearest.max() >= shape_a.n_vertices:
                raise ShapeIOError(
                    f"{gt_nearest_path} does not map {n_target} samples onto "
                    f"{shape_a.n_vertices} vertices"
                )
            return mesh_to_cloud_ground_truth(nearest, shape_a.n_vertices)
        return None, None

    def run_match(
        self,
        path_a: str,
        path_b: str,
        out_dir: Optional[PathLike] = None,
        gt_path: Optional[PathLike] = None,
        gt_nearest_path: Optional[PathLike] = None,
        dump_descriptors: bool = False,
    ) -> CorrespondenceReport:
        """Run the full pipeline on two shape files and write the report and artifacts

        Raises:
            InputError: If a file is unreadable or invalid
            PipelineError: If a stage fails
        """
        try:
            runner = StageRunner("match")
            knn = self.config.descriptors.knn
            shape_a = runner.run("load", load_input, path_a, knn)
            shape_b = runner.run("load", load_input, path_b, knn)
            gt, mask = runner.run(
                "load", self._ground_truth, shape_a, shape_b.n_vertices, gt_path, gt_nearest_path
            )
            result = self.pipeline.match(shape_a, shape_b, runner, gt, mask)
            if out_dir is None and dump_descriptors:
                logger.warning("--dump-descriptors has no effect without an output directory")
            if out_dir is not None:
                write_report(out_dir, result.report)
                write_artifacts(
                    out_dir,
                    result.report,
                    shape_a,
                    shape_b,
                    result.descriptors if dump_descriptors else None,
                )
            return result.report
        except (StageError, *INPUT_ERRORS) as e:
            logger.error(f"Match failed: {e}")
            raise _wrap(e, "match") from e

    def run_self_symmetry(
        self,
        path: str,
        out_dir: Optional[PathLike] = None,
        dump_descriptors: bool = False,
    ) -> CorrespondenceReport:
        """Match a shape's graph against itself and report its symmetric node groups"""
        try:
            runner = StageRunner("self")
            shape = runner.run("load", load_input, path, self.config.descriptors.knn)
            result = self.pipeline.self_symmetry(shape, runner)
            if out_dir is not None:
                write_report(out_dir, result.report)
                write_artifacts(
                    out_dir,
                    result.report,
                    shape,
                    shape,
                    result.descriptors if dump_descriptors else None,
                )
            return result.report
        except (StageError, *INPUT_ERRORS) as e:
            logger.error(f"Self-symmetry failed: {e}")
            raise _wrap(e, "self") from e

    def evaluate_report(
        self,
        report_path: PathLike,
        gt_path: Optional[PathLike] = None,
        gt_nearest_path: Optional[PathLike] = None,
        exclude_unmatched: Optional[bool] = None,
    ) -> Dict[str, Optional[float]]:
        """Accuracy of a stored report against a ground-truth map"""
        try:
            report = read_report(report_path)
            if gt_path is None and gt_nearest_path is None:
                raise EvaluationError("A ground-truth map (--gt or --gt-nearest) is required")
            shape_a = load_input(report.shape_a, report.parameters.descriptors.knn)
            labels_a = np.asarray(report.labels_a, dtype=np.int64)
            labels_b = np.asarray(report.labels_b, dtype=np.int64)
            if len(labels_a) != shape_a.n_vertices:
                raise EvaluationError(
                    f"Report labels {len(labels_a)} vertices, {report.shape_a} has {shape_a.n_vertices}"
                )
            gt, mask = self._ground_truth(shape_a, len(labels_b), gt_path, gt_nearest_path)
            exclude = (
                report.parameters.evaluation.exclude_unmatched
                if exclude_unmatched is None
                else exclude_unmatched
            )

            n_a, n_b = len(report.graph_a.nodes), len(report.graph_b.nodes)
            sym = SymmetricMatching.from_record(report.symmetric_matching, n_a, n_b)
            scores: Dict[str, Optional[float]] = {
                "accuracy": region_accuracy(
                    labels_a, labels_b, sym, gt, shape_a.vertex_area, exclude, mask
                ),
                "one_to_one_accuracy": None,
            }
            if report.one_to_one is not None:
                one = OneToOneMatching.from_record(report.one_to_one)
                scores["one_to_one_accuracy"] = region_accuracy(
                    labels_a, labels_b, one, gt, shape_a.vertex_area, exclude, mask
                )
            logger.info(f"Evaluated {report_path}: {scores}")
            return scores
        except INPUT_ERRORS as e:
            logger.error(f"Evaluation failed: {e}")
            raise InputError(f"eval: {e}") from e

    def sample(
        self,
        mesh_path: str,
        points: int,
        noise: float,
        seed: int,
        out_path: PathLike,
    ) -> Path:
        """Write an area-uniform noisy sampling as .xyz plus its nearest-vertex map"""
        try:
            shape = load_input(mesh_path, self.config.descriptors.knn)
            cloud, nearest = sample_point_cloud(
                shape, points, noise, seed, k=self.config.descriptors.knn
            )
        except ShapeIOError as e:
            raise InputError(f"sample: {e}") from e
        except Exception as e:
            logger.error(f"Sampling failed: {e}")
            raise InputError(f"sample: {e}") from e

        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_xyz(out, cloud.vertices)
        nearest_path = out.with_name(f"{out.stem}.nearest.txt")
        write_index_file(nearest_path, nearest)
        logger.info(f"Wrote {points} samples to {out} and nearest vertices to {nearest_path}")
        return out

    def _sweep_trial(
        self, trial: SweepTrial, inputs: Dict[str, _SweepInput], pipeline: CorrespondencePipeline
    ) -> float:
        pair = inputs[trial.source]
        knn = pipeline.config.descriptors.knn
        mesh_a, mesh_b = pair.mesh_a, pair.mesh_b
        if trial.mode is SweepMode.MESH_TO_CLOUD:
            cloud_b, nearest_b = sample_point_cloud(mesh_b, trial.points, trial.noise, trial.seed, k=knn)
            shape_a, shape_b = mesh_a, cloud_b
            gt, mask = mesh_to_cloud_ground_truth(nearest_b, mesh_b.n_vertices, pair.vertex_map)
        else:
            cloud_a, nearest_a = sample_point_cloud(mesh_a, trial.points, trial.noise, trial.seed, k=knn)
            cloud_b, nearest_b = sample_point_cloud(
                mesh_b, trial.points, trial.noise, trial.seed + SECOND_CLOUD_SEED_OFFSET, k=knn
            )
            shape_a, shape_b = cloud_a, cloud_b
            gt, mask = cloud_to_cloud_ground_truth(
                nearest_a, nearest_b, mesh_b.n_vertices, pair.vertex_map
            )
        result = pipeline.match(shape_a, shape_b, StageRunner("sweep"), gt, mask)
        accuracy = float(result.report.accuracy)
        logger.info(
            f"{trial.source} {trial.mode.value} n={trial.points} noise={trial.noise} "
            f"seed={trial.seed}: accuracy {accuracy:.4f}"
        )
        return accuracy

    def _load_pairs(self, pairs: List[MeshPair]) -> Dict[str, _SweepInput]:
        knn = self.config.descriptors.knn
        meshes: Dict[str, Shape] = {}
        for source in {s for pair in pairs for s in (pair.source_a, pair.source_b)}:
            shape = load_input(source, knn)
            if shape.kind is not ShapeKind.MESH:
                raise ShapeValidationError(f"{source} is not a mesh; the sweep samples mesh surfaces")
            meshes[source] = shape

        inputs: Dict[str, _SweepInput] = {}
        for pair in pairs:
            mesh_a, mesh_b = meshes[pair.source_a], meshes[pair.source_b]
            if pair.gt_path is not None:
                vertex_map = load_ground_truth(pair.gt_path, mesh_a.n_vertices, mesh_b.n_vertices)
            elif pair.is_self_pair:
                vertex_map = identity_ground_truth(mesh_a.n_vertices)
            else:
                vertex_map = builtin_vertex_map(pair.source_a, pair.source_b, mesh_a, mesh_b)
            inputs[pair.label] = _SweepInput(mesh_a, mesh_b, vertex_map)
        return inputs

    def run_robustness_sweep(
        self,
        pairlist: Optional[PathLike] = None,
        out_path: Optional[PathLike] = None,
        pairs: Optional[List[MeshPair]] = None,
        sweep_config: Optional[SweepConfig] = None,
    ) -> List[SweepCell]:
        """Sampling-density and noise sweep; one CSV row per (mode, density, noise) cell

        Every pair (A, B) is matched as mesh A against clouds sampled from B and
        as a cloud of A against a cloud of B, with ground truth carried through
        the A -> B vertex map.
        """
        sweep_config = sweep_config or (SweepConfig.testing() if self.testing else SweepConfig())
        try:
            if pairs is None:
                if pairlist is None:
                    raise ShapeIOError("sweep needs a list of mesh pairs")
                pairs = read_pairlist(pairlist)
            inputs = self._load_pairs(pairs)
        except INPUT_ERRORS as e:
            logger.error(f"Sweep input failed: {e}")
            raise InputError(f"sweep: {e}") from e

        # sweep trials already run in parallel; each pipeline stays single-threaded
        sweep_pipeline = CorrespondencePipeline(
            self.config.model_copy(update={"symmetric_only": True, "workers": 1})
        )
        runner = SweepRunner(sweep_config, max_workers=self.config.workers)
        try:
            cells = runner.run(
                [pair.label for pair in pairs],
                lambda trial: self._sweep_trial(trial, inputs, sweep_pipeline),
            )
        except (StageError, *INPUT_ERRORS) as e:
            logger.error(f"Sweep failed: {e}")
            raise _wrap(e, "sweep") from e
        except Exception as e:
            logger.error(f"Sweep failed: {e}")
            raise PipelineError(f"sweep: {e}") from e

        if out_path is not None:
            write_sweep_csv(out_path, cells)
        return cells

    def export_constraints(
        self,
        report_path: PathLike,
        out_path: Optional[PathLike] = None,
        mode: MatchMode = MatchMode.SYMMETRIC,
    ) -> Path:
        """Write region indicator constraints of a stored report as .npz"""
        try:
            report = read_report(report_path)
            constraints = export_indicator_constraints(report, mode)
        except INPUT_ERRORS as e:
            logger.error(f"Constraint export failed: {e}")
            raise InputError(f"export-constraints: {e}") from e
        base = Path(report_path)
        base = base if base.is_dir() else base.parent
        out = Path(out_path) if out_path else base / f"constraints_{mode.value}.npz"
        write_indicator_constraints(out, constraints)
        logger.info(f"Wrote {constraints.n_constraints} constraints to {out}")
        return out


def _resolve(token: str, base: Path) -> str:
    if token.startswith(BUILTIN_PREFIX) or Path(token).is_absolute():
        return token
    return str(base / token)


def read_pairlist(path: PathLike) -> List[MeshPair]:
    """One pair per line: `A` (A against itself), `A B` or `A B GT`.

    GT is a vertex map A -> B; without it B must be A itself or a builtin of
    the same family. Relative paths are taken from the list's directory and
    `#` starts a comment.
    """
    p = Path(path)
    if not p.is_file():
        raise ShapeIOError(f"No such file: {p}")
    pairs = []
    for number, line in enumerate(p.read_text().splitlines(), start=1):
        tokens = [_resolve(t, p.parent) for t in line.split("#", 1)[0].split()]
        if not tokens:
            continue
        if len(tokens) > 3:
            raise ShapeFormatError(f"{p}:{number}: expected 'A [B [GT]]', got {len(tokens)} fields")
        source_a = tokens[0]
        source_b = tokens[1] if len(tokens) > 1 else source_a
        pairs.append(MeshPair(source_a, source_b, tokens[2] if len(tokens) == 3 else None))
    if not pairs:
        raise ShapeIOError(f"{p} lists no mesh pairs")
    return pairs


def write_sweep_csv(path: PathLike, cells: List[SweepCell]) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for cell in cells:
            writer.writerow(cell.as_row())
    logger.info(f"Wrote {len(cells)} sweep cells to {out}")
