import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import ValidationError

from lib.mesh_io import (
    UNMATCHED_COLOR,
    label_colors,
    palette_for,
    write_colored_ply,
    write_descriptor_csv,
    write_index_file,
)
from optypes.match_types import (
    CorrespondenceReport,
    DescriptorField,
    OneToOneMatching,
    PipelineConfig,
    SelfSymmetryEntry,
    Shape,
    ShapeGraph,
    SymmetricMatching,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
REPORT_FILE = "report.json"
TIMINGS_FILE = "timings.json"


class ReportError(Exception):
    """Raised when a report cannot be built, written or read"""
    pass


class ReportBuilder:
    """Builder for correspondence reports"""

    def __init__(self, mode: str, shape_a: str):
        self._fields: Dict[str, Any] = {
            "mode": mode,
            "shape_a": shape_a,
            "metadata": {},
            "timings": {},
        }

    def shape_b(self, source: Optional[str]) -> "ReportBuilder":
        self._fields["shape_b"] = source
        return self

    def parameters(self, config: PipelineConfig) -> "ReportBuilder":
        self._fields["parameters"] = config
        return self

    def segmentation(
        self,
        k: int,
        k_distances: Dict[int, float],
        graph_a: ShapeGraph,
        shape_a: Shape,
        graph_b: ShapeGraph,
        shape_b: Shape,
    ) -> "ReportBuilder":
        """Record the chosen k, per-vertex labels and both shape graphs"""
        self._fields.update(
            chosen_k=k,
            k_distances={str(key): float(v) for key, v in sorted(k_distances.items())},
            labels_a=graph_a.vertex_to_node.tolist(),
            labels_b=graph_b.vertex_to_node.tolist(),
            graph_a=graph_a.to_record(shape_a.vertex_area),
            graph_b=graph_b.to_record(shape_b.vertex_area),
            segments_a=graph_a.n_nodes,
            segments_b=graph_b.n_nodes,
        )
        return self

    def symmetric(self, matching: SymmetricMatching) -> "ReportBuilder":
        params = self._fields.get("parameters")
        self._fields["symmetric_matching"] = matching.to_record(
            params.matching if params else None
        )
        return self

    def one_to_one(self, matching: Optional[OneToOneMatching]) -> "ReportBuilder":
        self._fields["one_to_one"] = matching.to_record() if matching else None
        return self

    def self_symmetry(self, entries: List[SelfSymmetryEntry]) -> "ReportBuilder":
        self._fields["self_symmetry"] = entries
        return self

    def accuracy(
        self, symmetric: Optional[float], one_to_one: Optional[float] = None
    ) -> "ReportBuilder":
        self._fields["accuracy"] = symmetric
        self._fields["one_to_one_accuracy"] = one_to_one
        return self

    def metadata(self, **values: Any) -> "ReportBuilder":
        self._fields["metadata"].update(values)
        return self

    def timings(self, timings: Dict[str, float], total: float) -> "ReportBuilder":
        self._fields["timings"] = dict(timings)
        self._fields["total_time"] = total
        return self

    def build(self) -> CorrespondenceReport:
        """Validate and return the final report"""
        try:
            report = CorrespondenceReport(**self._fields)
        except ValidationError as e:
            logger.error(f"Invalid report: {e}")
            raise ReportError(f"Report is incomplete or invalid: {e}") from e
        return report


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

def write_report(out_dir: PathLike, report: CorrespondenceReport) -> Path:
    """Write report.json (without wall times) and timings.json beside it."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = report.model_dump_json(indent=2, exclude={"timings", "total_time"})
    path = out / REPORT_FILE
    path.write_text(body + "\n")
    (out / TIMINGS_FILE).write_text(
        json.dumps({"timings": report.timings, "total_time": report.total_time}, indent=2) + "\n"
    )
    logger.info(f"Wrote {path}")
    return path


def read_report(path: PathLike) -> CorrespondenceReport:
    """Read a report, merging timings.json back in when it is present."""
    p = Path(path)
    if p.is_dir():
        p = p / REPORT_FILE
    try:
        data = json.loads(p.read_text())
        timings_path = p.parent / TIMINGS_FILE
        if timings_path.is_file():
            data.update(json.loads(timings_path.read_text()))
        return CorrespondenceReport.model_validate(data)
    except (OSError, json.JSONDecodeError, ValidationError) as e:
        logger.error(f"Failed to read report {p}: {e}")
        raise ReportError(f"Could not read report {p}: {e}") from e


def _write_json(path: Path, payload: str) -> None:
    path.write_text(payload + "\n")


def node_colors_b(n_b: int, matches_b: Dict[int, List[int]], colors_a: np.ndarray) -> np.ndarray:
    """B nodes take the color of their lowest matched A node; unmatched ones are black."""
    colors = np.tile(UNMATCHED_COLOR, (n_b, 1))
    for b in range(n_b):
        partners = matches_b.get(b) or []
        if partners:
            colors[b] = colors_a[min(partners)]
    return colors


def write_artifacts(
    out_dir: PathLike,
    report: CorrespondenceReport,
    shape_a: Shape,
    shape_b: Shape,
    descriptors: Optional[Dict[str, DescriptorField]] = None,
) -> None:
    """Label files, graph/matching JSON dumps and colored PLYs for one run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_index_file(out / "labels_a.txt", np.asarray(report.labels_a))
    _write_json(out / "graph_a.json", report.graph_a.model_dump_json(indent=2))
    _write_json(out / "matching.json", report.symmetric_matching.model_dump_json(indent=2))
    if report.one_to_one is not None:
        _write_json(out / "one_to_one.json", report.one_to_one.model_dump_json(indent=2))

    labels_a = np.asarray(report.labels_a, dtype=np.int64)
    colors_a = palette_for(report.segments_a)
    write_colored_ply(out / "regions_a.ply", shape_a, label_colors(labels_a, colors_a))

    if report.mode != "self":
        write_index_file(out / "labels_b.txt", np.asarray(report.labels_b))
        _write_json(out / "graph_b.json", report.graph_b.model_dump_json(indent=2))
        if report.one_to_one is not None:
            matches_b = {p.b: [p.a] for p in report.one_to_one.pairs}
        else:
            matches_b = {}
            for pair in report.symmetric_matching.pairs:
                matches_b.setdefault(pair.b, []).append(pair.a)
        colors_b = node_colors_b(report.segments_b, matches_b, colors_a)
        labels_b = np.asarray(report.labels_b, dtype=np.int64)
        write_colored_ply(out / "regions_b.ply", shape_b, label_colors(labels_b, colors_b))

    for name, field in (descriptors or {}).items():
        write_descriptor_csv(out / f"descriptors_{name}.csv", field)
    logger.info(f"Wrote artifacts to {out}")
