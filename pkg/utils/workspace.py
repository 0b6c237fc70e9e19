# utils/workspace.py

"""
The output directory of one pipeline configuration: where every artifact lives
and how to load it back with its config hash checked.

Layout under `<output_dir>/`:
    mesh.trimesh                      cmd mesh
    green_interferer.wgrn             cmd precompute
    green_intruder.wgrn
    projector.wprj
    matrices_<mesh hash>/{M,K,S}.spsym
    field_intruder.wfld               cmd precompute, field_snapshot only
    dataset/manifest_<split>.csv      cmd gendata
    dataset/<split>/<id>.wspc
    dataset/images/<freq>hz.{pgm,csv}
    model.wnet, training_log.csv      cmd train
    attack/report.csv                 cmd attack
    attack/signals/<id>.csv
    attack/images/<id>_{clean,attacked}.{pgm,csv} (+ .png)
    accuracy_table.md                 cmd evaluate
    bench_table.md                    cmd bench
    summary_<command>.json            every command
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from agents.detector import DetectorAgent, LabeledExample, ModelParams
from physics.adjoint_green import GreenOperator
from physics.fem_assembly import FemMatrices, Point2, TriMesh, receiver_weights
from physics.wave_sim import SimConfig, StepOperators, TimeGrid, build_step_operators
from signal_processing.noise_band import NoiseSpec
from signal_processing.spectral import BandSelector, NullspaceProjector, StftPlan, constraint_matrix, disallowed_rows
from utils import artifact_io
from utils.config_loader import PipelineConfig, config_hash, ensure_dir
from utils.errors import ArtifactMismatchError

logger = logging.getLogger("WaveAttack.Workspace")


class Workspace:
    def __init__(self, cfg: PipelineConfig, out_dir: Optional[str] = None):
        self.cfg = cfg
        self.root = ensure_dir(out_dir or cfg.output_dir)

    # ------------------------------------------------------------ paths

    def hash(self, stage: str) -> str:
        return config_hash(self.cfg, stage)

    @property
    def mesh_path(self) -> Path:
        return self.root / "mesh.trimesh"

    def green_path(self, source: str) -> Path:
        return self.root / f"green_{source}.wgrn"

    @property
    def projector_path(self) -> Path:
        return self.root / "projector.wprj"

    @property
    def matrices_dir(self) -> Path:
        """Keyed by the mesh hash, so matrices of another mesh are never picked up."""
        return self.root / f"matrices_{self.hash('mesh')}"

    def matrix_path(self, name: str) -> Path:
        return self.matrices_dir / f"{name}.spsym"

    @property
    def field_path(self) -> Path:
        return self.root / "field_intruder.wfld"

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    def manifest_path(self, split: str) -> Path:
        return self.dataset_dir / f"manifest_{split}.csv"

    @property
    def model_path(self) -> Path:
        return self.root / "model.wnet"

    @property
    def training_log_path(self) -> Path:
        return self.root / "training_log.csv"

    @property
    def attack_dir(self) -> Path:
        return self.root / "attack"

    @property
    def attack_report_path(self) -> Path:
        return self.attack_dir / "report.csv"

    def summary_path(self, command: str) -> Path:
        return self.root / f"summary_{command}.json"

    # ------------------------------------------------------------ derived objects

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.cfg.dt_s, self.cfg.num_steps)

    @property
    def plan(self) -> StftPlan:
        cfg = self.cfg
        return StftPlan(window=cfg.stft_window, hop=cfg.stft_hop, num_freqs=cfg.stft_num_freqs,
                        dt=cfg.dt_s, num_samples=cfg.num_steps + 1)

    @property
    def selector(self) -> BandSelector:
        return disallowed_rows(self.plan, self.cfg.band_low_hz, self.cfg.band_high_hz)

    @property
    def sim_config(self) -> SimConfig:
        cfg = self.cfg
        return SimConfig(wave_speed=cfg.c_m_per_s, interferer=Point2(*cfg.interferer),
                         intruder=Point2(*cfg.intruder), detector=Point2(*cfg.detector), epsilon=cfg.epsilon)

    @property
    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(kappa=self.cfg.noise_kappa, seed=0, mode=self.cfg.noise_mode)

    # ------------------------------------------------------------ loaders

    def load_mesh(self) -> TriMesh:
        return artifact_io.read_mesh(self.mesh_path, self.hash("mesh"))

    def load_matrices(self, mesh: TriMesh) -> Optional[FemMatrices]:
        """The matrices stored by precompute, or None when they have not been written."""
        paths = [self.matrix_path(name) for name in FemMatrices._fields]
        if not all(path.exists() for path in paths):
            return None
        matrices = FemMatrices(*(artifact_io.read_spsym(path) for path in paths))
        if matrices.M.shape[0] != mesh.num_nodes:
            raise ArtifactMismatchError(f"{self.matrices_dir} holds {matrices.M.shape[0]}-node matrices, "
                                        f"the mesh has {mesh.num_nodes} nodes.")
        return matrices

    def step_operators(self, mesh: Optional[TriMesh] = None, check_spectrum: bool = False) -> StepOperators:
        mesh = mesh if mesh is not None else self.load_mesh()
        return build_step_operators(mesh, self.cfg.c_m_per_s, self.grid, matrices=self.load_matrices(mesh),
                                    solver=self.cfg.solver, check_spectrum=check_spectrum)

    def detector_weights(self, mesh: TriMesh) -> np.ndarray:
        return receiver_weights(mesh, Point2(*self.cfg.detector))

    def load_green(self, source: str) -> GreenOperator:
        return artifact_io.read_green(self.green_path(source), self.hash("precompute"))

    def load_projector(self) -> NullspaceProjector:
        """The stored basis, with the band constraint rebuilt so feasibility residuals can be reported."""
        selector = self.selector
        constraint = constraint_matrix(self.plan, selector) if len(selector) else None
        projector = artifact_io.read_projector(self.projector_path, self.hash("precompute"), constraint=constraint)
        if projector.selector != selector:
            raise ArtifactMismatchError(f"{self.projector_path} constrains rows {projector.selector.rows}, "
                                        f"the active configuration {selector.rows}.")
        return projector

    def load_detector(self) -> DetectorAgent:
        arrays = artifact_io.read_named_arrays(self.model_path, self.hash("train"))
        return DetectorAgent(ModelParams.from_arrays(arrays))

    def load_split(self, split: str) -> List[LabeledExample]:
        expected = self.hash("gendata")
        examples = []
        for row in artifact_io.read_rows(self.manifest_path(split)):
            values, _ = artifact_io.read_spectrogram(self.dataset_dir / row["path"], expected)
            examples.append(LabeledExample(values=values, label=int(row["label"]),
                                           frequency_hz=float(row["frequency_hz"]),
                                           example_id=row["id"], seed=int(row["seed"])))
        return examples

    def write_summary(self, command: str, payload: Dict) -> Path:
        path = self.summary_path(command)
        body = {"command": command, "profile": self.cfg.config_name, "config_hash": config_hash(self.cfg), **payload}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(body, f, ensure_ascii=False, indent=2, default=float)
        logger.info(f"Summary written to {path}")
        return path
