"""
Artifact storage for the Markov LSA inference toolkit.
Handles environment JSON, trajectory binaries, JSON reports and CSV results.
"""

import csv
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np

from .config import config
from .env import FeatureMap, FiniteMdp, Policy
from .exceptions import ConfigError, InvalidDimensionError
from .lsa import LsaTrajectory

logger = logging.getLogger(__name__)

TRAJECTORY_MAGIC = b"LSATRAJ1"
_TRAJECTORY_HEADER = struct.Struct("<8sQQ")

PathLike = Union[str, Path]


class CsvReport:
    """
    CSV writer that flushes each row as soon as it is written.

    The file starts with ``#`` provenance lines and the column header. When
    the ``with`` block exits on an exception a ``# INCOMPLETE`` trailer is
    appended before the exception propagates.
    """

    def __init__(self, path: PathLike, columns: Sequence[str], header_lines: Iterable[str] = ()):
        self.path = Path(path)
        self.columns = list(columns)
        self.header_lines = list(header_lines)
        self._handle: Optional[TextIO] = None
        self._writer: Optional[csv.DictWriter] = None

    def __enter__(self) -> "CsvReport":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", encoding="utf-8", newline="")
        for line in self.header_lines:
            self._handle.write(f"# {line}\n")
        self._writer = csv.DictWriter(self._handle, fieldnames=self.columns, lineterminator="\n")
        self._writer.writeheader()
        self._handle.flush()
        return self

    def write_row(self, row: Dict[str, Any]) -> None:
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise InvalidDimensionError(f"row is missing columns {missing}")
        self._writer.writerow({c: _format_cell(row[c]) for c in self.columns})
        self._handle.flush()

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            logger.error(f"Report {self.path} left incomplete: {exc}")
            self._handle.write("# INCOMPLETE\n")
        self._handle.close()
        self._handle = None
        self._writer = None
        return False


def _format_cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


class ArtifactStorage:
    """Reads and writes the files the toolkit produces."""

    def __init__(self, output_dir: Optional[Path] = None):
        self.output_dir = Path(output_dir) if output_dir is not None else config.OUTPUT_DIR

    def resolve(self, path: Optional[PathLike], default_name: str) -> Path:
        """Explicit path, or ``default_name`` under the output directory."""
        return Path(path) if path is not None else self.output_dir / default_name

    def save_json(self, path: PathLike, payload: Dict[str, Any]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, allow_nan=True) + "\n", encoding="utf-8")
        logger.info(f"Wrote {path}")
        return path

    def load_json(self, path: PathLike) -> Dict[str, Any]:
        try:
            return json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            logger.error(f"Failed to read {path}: {e}")
            raise ConfigError(f"cannot read JSON artifact {path}: {e}") from e

    def environment_payload(self, mdp: FiniteMdp, policy: Optional[Policy] = None,
                            features: Optional[FeatureMap] = None) -> Dict[str, Any]:
        # float repr keeps 17 significant digits, so the round trip is exact
        return {
            "n_states": mdp.n_states,
            "n_actions": mdp.n_actions,
            "discount": mdp.discount,
            "transition": mdp.transition.tolist(),
            "reward": mdp.reward.tolist(),
            "policy": None if policy is None else policy.probs.tolist(),
            "features": None if features is None else features.features.tolist(),
        }

    def save_environment(self, path: PathLike, mdp: FiniteMdp, policy: Optional[Policy] = None,
                         features: Optional[FeatureMap] = None) -> Path:
        return self.save_json(path, self.environment_payload(mdp, policy, features))

    def load_environment(self, path: PathLike) -> Tuple[FiniteMdp, Optional[Policy], Optional[FeatureMap]]:
        """
        Load an environment JSON written by ``save_environment``.

        Returns:
            Tuple of the MDP and the optional policy and feature map
        """
        payload = self.load_json(path)
        try:
            mdp = FiniteMdp(np.array(payload["transition"]), np.array(payload["reward"]),
                            float(payload["discount"]))
            policy = None if payload.get("policy") is None else Policy(np.array(payload["policy"]))
            features = None if payload.get("features") is None else FeatureMap(np.array(payload["features"]))
        except KeyError as e:
            logger.error(f"Environment file {path} lacks {e}")
            raise ConfigError(f"environment file {path} lacks field {e}") from e
        if mdp.n_states != payload["n_states"] or mdp.n_actions != payload["n_actions"]:
            raise InvalidDimensionError("declared sizes do not match the stored tables")
        return mdp, policy, features

    def export_trajectory(self, path: PathLike, traj: LsaTrajectory) -> Path:
        """Little-endian binary: magic, n, d, then the row-major n×d iterates."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        iterates = np.ascontiguousarray(traj.iterates, dtype="<f8")
        with open(path, "wb") as handle:
            handle.write(_TRAJECTORY_HEADER.pack(TRAJECTORY_MAGIC, traj.n, traj.dim))
            handle.write(iterates.tobytes())
        return path

    def import_trajectory(self, path: PathLike) -> LsaTrajectory:
        data = Path(path).read_bytes()
        if len(data) < _TRAJECTORY_HEADER.size:
            raise InvalidDimensionError(f"{path} is too short for a trajectory header")
        magic, n, d = _TRAJECTORY_HEADER.unpack_from(data)
        if magic != TRAJECTORY_MAGIC:
            raise InvalidDimensionError(f"{path} is not a trajectory file")
        body = np.frombuffer(data, dtype="<f8", offset=_TRAJECTORY_HEADER.size)
        if body.size != n * d:
            raise InvalidDimensionError(f"{path} holds {body.size} values, expected {n * d}")
        return LsaTrajectory.from_iterates(body.reshape(n, d).astype(float))

    def csv_report(self, path: PathLike, columns: Sequence[str], header_lines: List[str]) -> CsvReport:
        return CsvReport(path, columns, header_lines)


# Global storage instance
storage = ArtifactStorage()
