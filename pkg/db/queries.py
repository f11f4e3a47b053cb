import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from .client import get_artifacts_root
from logic.config import RunConfig, parse_config, write_config
from logic.nn import Architecture, parse_encoding, read_vector_file, write_vector_file
from logic.sharing import ShareSet

METRICS_FILE = "metrics.csv"
REPORT_FILE = "report.json"
CONFIG_FILE = "config.env"
SEED_FILE = "seed.json"
MODEL_DIR = "model"


class ArtifactStore:
    """Run artifacts on disk: one directory per run under the artifacts root."""

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root) if root is not None else get_artifacts_root()

    def run_dir(self, run: str, create: bool = False) -> Path:
        path = (self.root / run).resolve()
        if self.root.resolve() not in path.parents and path != self.root.resolve():
            raise ValueError(f"run name '{run}' escapes the artifacts root")
        if create:
            path.mkdir(parents=True, exist_ok=True)
        return path

    def _existing(self, run: str, name: str) -> Path:
        path = self.run_dir(run) / name
        if not path.exists():
            raise FileNotFoundError(f"run '{run}' has no {name}")
        return path

    # --- Runs ---
    def list_runs(self) -> List[str]:
        """Run names (relative paths) of every directory holding a metrics file."""
        if not self.root.exists():
            return []
        return sorted(p.parent.relative_to(self.root).as_posix() for p in self.root.rglob(METRICS_FILE))

    # --- Metrics ---
    def write_metrics(self, run: str, series) -> Path:
        from logic.scenarios import emit_metrics
        return emit_metrics(series, self.run_dir(run, create=True))

    def read_metrics(self, run: str) -> pd.DataFrame:
        return pd.read_csv(self._existing(run, METRICS_FILE), keep_default_na=False)

    # --- Report ---
    def write_report(self, run: str, report: Dict[str, Any]) -> Path:
        path = self.run_dir(run, create=True) / REPORT_FILE
        path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        return path

    def read_report(self, run: str) -> Dict[str, Any]:
        return json.loads(self._existing(run, REPORT_FILE).read_text(encoding="utf-8"))

    # --- Config echo / seed record ---
    def write_config(self, run: str, cfg: RunConfig) -> Path:
        return write_config(cfg, self.run_dir(run, create=True) / CONFIG_FILE)

    def read_config(self, run: str) -> RunConfig:
        return parse_config(self._existing(run, CONFIG_FILE))

    def write_seed(self, run: str, cfg: RunConfig) -> Path:
        path = self.run_dir(run, create=True) / SEED_FILE
        path.write_text(json.dumps({"master_seed": cfg.seed,
                                    "derivation": "sha256(master_seed|kind|entity|round)[:8]"}, indent=2),
                        encoding="utf-8")
        return path

    # --- Model shares ---
    def save_model_shares(self, run: str, model: ShareSet, arch: Architecture) -> List[Path]:
        """One file per compute party of the owning committee."""
        directory = self.run_dir(run, create=True) / MODEL_DIR
        n = len(model.shares)
        paths = []
        for k, share in enumerate(model.shares):
            encoding = f"ring64-share:f={model.frac_bits}:owner={model.owner}:party={k}:of={n}"
            paths.append(write_vector_file(directory / f"share-{k}.bin", arch.descriptor(), encoding, share))
        return paths

    def load_model_shares(self, run: str) -> Tuple[ShareSet, Architecture]:
        directory = self._existing(run, MODEL_DIR)
        files = sorted(directory.glob("share-*.bin"), key=lambda p: int(p.stem.split("-")[1]))
        if not files:
            raise FileNotFoundError(f"run '{run}' has no model shares")
        shares, descriptor, info = [], None, None
        for path in files:
            descriptor, encoding, values = read_vector_file(path)
            info = parse_encoding(encoding)
            if info["kind"] != "ring64-share":
                raise ValueError(f"{path}: expected a share file, got '{encoding}'")
            shares.append(values)
        if int(info["of"]) != len(shares):
            raise ValueError(f"run '{run}': {len(shares)} share files, header says {info['of']}")
        return ShareSet(info["owner"], shares, int(info["f"])), Architecture.from_descriptor(descriptor)

    # --- Whole run ---
    def save_run(self, run: str, result, report: Optional[Dict[str, Any]] = None) -> Path:
        self.write_metrics(run, result.metrics)
        self.write_config(run, result.config)
        self.write_seed(run, result.config)
        if report is not None:
            self.write_report(run, report)
        self.save_model_shares(run, result.final_model, result.arch)
        return self.run_dir(run)
