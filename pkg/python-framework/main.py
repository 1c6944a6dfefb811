#!/usr/bin/env python3
"""
YOSO TTFS Toolkit - Pipeline Driver
Trains the ReLU MLP, converts and fine-tunes the TTFS network, encodes the
test set, maps onto the accelerator grid, runs the reference and hardware
backends and reports accuracy and memory-access counters.
"""

import argparse
import asyncio
import json
import logging
import sys
import time
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from joblib import Parallel, delayed
from tqdm import tqdm

from ann_core import (
    FormatError,
    TrainerConfig,
    TrainingDivergenceError,
    TrainingReport,
    ann_train_sgd,
    load_mnist,
    load_params,
    save_params,
)
from conversion import ConversionError, QuantSpec, convert_ann, load_snn, requantize, save_snn
from finetune import FinetuneConfig, FinetuneDivergenceError, finetune, write_finetune_log
from reporting import (
    build_report,
    compare_traces,
    prediction_frame,
    run_trace_frame,
    write_json,
)
from ttfs_network import (
    EncodingConfig,
    ForwardResult,
    NoDecisionError,
    SimulationOptions,
    SpikeTimeVector,
    TTFSNetwork,
    decode_first_spike,
    decode_softmax_membrane,
    itl_encode,
    network_forward,
)
from yoso_hardware import AccessCounters, EnergyModel, PEConfig, SimulationFault
from yoso_mapping import GridConfig, MappingError, load_placement, map_network, save_placement
from yoso_simulator import build_system

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4


class PipelineConfigError(ValueError):
    """Configuration file or overrides are invalid"""


class ArtifactMissingError(FileNotFoundError):
    """An upstream stage has not produced the artifact this stage needs"""


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class QuantizationConfig:
    enabled: bool = True
    bits: int = 8
    potential_bits: int = 16
    clamp_ticks_per_unit: bool = True


@dataclass
class HardwareConfig:
    grid_width: int = 6
    grid_height: int = 7
    fifo_depth: int = 16
    hop_latency: int = 1
    raw_protection: bool = True
    clock_hz: float = 120e3


@dataclass
class PipelineConfig:
    """Pipeline configuration; nested sections map to the module configs"""
    schema_version: int = SCHEMA_VERSION
    seed: Optional[int] = None
    data_dir: str = "./data/mnist"
    out_dir: str = "./artifacts"
    architecture: str = "784-300-300-10"
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    normalization_samples: Optional[int] = None
    theta: float = 1.0
    calibrate_thresholds: bool = True
    calibration_samples: int = 200
    decode: str = "membrane"
    early_stop: bool = False
    softmax_output: bool = False
    bias_as_initial_potential: bool = False
    jobs: int = 1
    progress: bool = True
    log_level: str = "INFO"

    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    quantization: QuantizationConfig = field(default_factory=QuantizationConfig)
    hardware: HardwareConfig = field(default_factory=HardwareConfig)
    energy: EnergyModel = field(default_factory=EnergyModel)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise PipelineConfigError(
                f"schema_version {self.schema_version} is not supported (expected {SCHEMA_VERSION})")
        if self.seed is None:
            raise PipelineConfigError("seed is mandatory (config 'seed' or --seed)")
        if self.decode not in ("membrane", "first-spike"):
            raise PipelineConfigError(f"decode must be 'membrane' or 'first-spike', got {self.decode}")
        if self.calibration_samples < 1:
            raise PipelineConfigError(f"calibration_samples must be at least 1, got {self.calibration_samples}")
        if self.jobs < 1:
            raise PipelineConfigError(f"jobs must be at least 1, got {self.jobs}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def quant_spec(self) -> Optional[QuantSpec]:
        if not self.quantization.enabled:
            return None
        return QuantSpec(bits=self.quantization.bits)

    @property
    def grid(self) -> GridConfig:
        hw = self.hardware
        return GridConfig(hw.grid_width, hw.grid_height,
                          PEConfig(fifo_depth=hw.fifo_depth, raw_protection=hw.raw_protection))

    @property
    def simulation_options(self) -> SimulationOptions:
        return SimulationOptions(early_stop=self.early_stop, softmax_output=self.softmax_output,
                                 bias_as_initial_potential=self.bias_as_initial_potential)


_SECTIONS = {
    'trainer': TrainerConfig,
    'finetune': FinetuneConfig,
    'encoding': EncodingConfig,
    'quantization': QuantizationConfig,
    'hardware': HardwareConfig,
    'energy': EnergyModel,
}


def _section(cls, data: Any, name: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise PipelineConfigError(f"section '{name}' must be a mapping")
    try:
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})
    except (TypeError, ValueError) as e:
        raise PipelineConfigError(f"invalid '{name}' section: {e}") from e


def config_from_dict(data: Dict[str, Any]) -> PipelineConfig:
    if not isinstance(data, dict):
        raise PipelineConfigError("configuration root must be a mapping")
    if 'schema_version' not in data:
        raise PipelineConfigError("configuration lacks schema_version")
    top = {k: v for k, v in data.items()
           if k in PipelineConfig.__dataclass_fields__ and k not in _SECTIONS}
    sections = {name: _section(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    try:
        config = PipelineConfig(**top, **sections)
    except TypeError as e:
        raise PipelineConfigError(f"invalid configuration: {e}") from e
    if config.schema_version != SCHEMA_VERSION:
        raise PipelineConfigError(
            f"schema_version {config.schema_version} is not supported (expected {SCHEMA_VERSION})")
    return config


def load_config(path: Optional[str]) -> PipelineConfig:
    """YAML (or JSON) config; a missing file falls back to defaults"""
    if path is None or not Path(path).exists():
        if path is not None:
            logger.warning(f"Config file {path} not found, using defaults")
        return PipelineConfig()
    try:
        with open(path, 'r') as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise PipelineConfigError(f"cannot parse {path}: {e}") from e
    return config_from_dict(data or {})


def apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """CLI flags take precedence over the file"""
    simple = {
        'seed': 'seed', 'out': 'out_dir', 'data_dir': 'data_dir', 'decode': 'decode',
        'limit': 'test_limit', 'jobs': 'jobs',
    }
    for arg, attr in simple.items():
        value = getattr(args, arg, None)
        if value is not None:
            setattr(config, attr, value)
    for flag in ('early_stop', 'softmax_output', 'bias_as_initial_potential'):
        if getattr(args, flag, False):
            setattr(config, flag, True)
    if getattr(args, 'quantize', None) is not None:
        config.quantization.enabled = args.quantize
    if getattr(args, 'error_scaled_step', False):
        config.finetune.error_scaled_step = True
    if getattr(args, 'verbose', False):
        config.log_level = "DEBUG"
    return config


# ============================================================================
# STAGE INTERFACE
# ============================================================================

@dataclass
class StageResult:
    stage: str
    success: bool
    artifacts: List[str] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    error: Optional[str] = None
    exit_code: int = EXIT_OK
    duration_seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class PipelineStage(ABC):
    """Base interface for all pipeline stages"""

    def __init__(self):
        self.config: Optional[PipelineConfig] = None

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @property
    def version(self) -> str:
        return "1.0.0"

    async def initialize(self, config: PipelineConfig) -> bool:
        self.config = config
        return True

    @abstractmethod
    async def run(self, **kwargs) -> StageResult:
        pass

    async def cleanup(self) -> None:
        pass

    # -- shared helpers --------------------------------------------------------

    @property
    def out_dir(self) -> Path:
        path = Path(self.config.out_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def artifact(self, name: str) -> Path:
        return self.out_dir / name

    def require(self, name: str, hint: str) -> Path:
        path = self.artifact(name)
        if not path.exists():
            raise ArtifactMissingError(f"{hint} missing: {path} (run the upstream stage first)")
        return path

    def rng(self, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, stream])

    def load_train(self) -> Tuple[np.ndarray, np.ndarray]:
        data_dir = Path(self.config.data_dir)
        if not data_dir.exists():
            raise PipelineConfigError(f"data_dir {data_dir} does not exist")
        return load_mnist(data_dir, "train", self.config.train_limit)

    def load_test(self) -> Tuple[np.ndarray, np.ndarray]:
        data_dir = Path(self.config.data_dir)
        if not data_dir.exists():
            raise PipelineConfigError(f"data_dir {data_dir} does not exist")
        return load_mnist(data_dir, "test", self.config.test_limit)

    def load_network(self) -> Tuple[TTFSNetwork, str]:
        """Fine-tuned network when present, otherwise the converted one"""
        for name in ("snn_finetuned.ttfs", "snn.ttfs"):
            path = self.artifact(name)
            if path.exists():
                return load_snn(path, self.config.quantization.potential_bits), name
        raise ArtifactMissingError(f"converted network missing in {self.out_dir}")

    def encoding_for(self, net: TTFSNetwork) -> EncodingConfig:
        """Encoding window at the network's temporal resolution"""
        enc = self.config.encoding
        if abs(enc.ticks_per_unit - net.ticks_per_unit) > 1e-9 * max(1.0, net.ticks_per_unit):
            return EncodingConfig(enc.t_max, enc.T_in, enc.T_max, net.ticks_per_unit)
        return enc


# ============================================================================
# STAGES
# ============================================================================

class TrainAnnStage(PipelineStage):
    @property
    def name(self) -> str:
        return "train-ann"

    async def run(self, **kwargs) -> StageResult:
        cfg = self.config
        X, y = self.load_train()
        X_test, y_test = self.load_test()
        report = TrainingReport()
        hyper = TrainerConfig(cfg.trainer.lr, cfg.trainer.epochs, cfg.trainer.batch, cfg.seed)
        params = ann_train_sgd((X, y), cfg.architecture, hyper, (X_test, y_test), report,
                               progress=cfg.progress)
        save_params(params, self.artifact("ann.mlpw"))
        write_json(report.to_dict(), self.artifact("ann_report.json"))
        return StageResult(self.name, True, ["ann.mlpw", "ann_report.json"], report.to_dict())


class ConvertStage(PipelineStage):
    @property
    def name(self) -> str:
        return "convert"

    async def run(self, **kwargs) -> StageResult:
        cfg = self.config
        params = load_params(self.require("ann.mlpw", "trained ANN"))
        X, _ = self.load_train()
        if cfg.normalization_samples is not None and cfg.normalization_samples < len(X):
            X = X[np.sort(self.rng(1).choice(len(X), cfg.normalization_samples, replace=False))]
        net, report = convert_ann(params, X, cfg.theta, cfg.quant_spec,
                                  cfg.encoding.ticks_per_unit, cfg.quantization.potential_bits,
                                  cfg.quantization.clamp_ticks_per_unit, encoding=cfg.encoding,
                                  calibrate=cfg.calibrate_thresholds,
                                  calibration_samples=cfg.calibration_samples)
        save_snn(net, self.artifact("snn.ttfs"))
        metrics = report.to_dict()
        metrics['ticks_per_unit'] = net.ticks_per_unit
        metrics['thresholds_q'] = [l.quant.threshold for l in net.layers] if net.quantized else None
        write_json(metrics, self.artifact("conversion_report.json"))
        return StageResult(self.name, True, ["snn.ttfs", "conversion_report.json"], metrics)


class FinetuneStage(PipelineStage):
    @property
    def name(self) -> str:
        return "finetune"

    async def run(self, **kwargs) -> StageResult:
        cfg = self.config
        params = load_params(self.require("ann.mlpw", "trained ANN"))
        snn = load_snn(self.require("snn.ttfs", "converted network"), cfg.quantization.potential_bits)
        X, _ = self.load_train()
        n = min(cfg.finetune.n, len(X))
        samples = X[np.sort(self.rng(2).choice(len(X), n, replace=False))]

        ft_cfg = FinetuneConfig(**{**asdict(cfg.finetune), 'progress': cfg.progress})
        result = finetune(params, snn, samples, ft_cfg, self.encoding_for(snn))
        tuned = result.network
        if cfg.quant_spec is not None:
            tuned = requantize(tuned, cfg.quant_spec, cfg.quantization.clamp_ticks_per_unit)
        save_snn(tuned, self.artifact("snn_finetuned.ttfs"))
        write_finetune_log(result, self.artifact("finetune_log.csv"))
        write_json(result.to_dict(), self.artifact("finetune_report.json"))
        return StageResult(self.name, True,
                           ["snn_finetuned.ttfs", "finetune_log.csv", "finetune_report.json"],
                           result.to_dict())


class EncodeStage(PipelineStage):
    @property
    def name(self) -> str:
        return "encode"

    async def run(self, **kwargs) -> StageResult:
        net, source = self.load_network()
        enc = self.encoding_for(net)
        X, y = self.load_test()
        continuous = np.stack([itl_encode(x, enc).times for x in X]) if len(X) else np.empty((0, 0))
        discrete = np.stack([itl_encode(x, enc, discrete=True).times for x in X]) if len(X) else np.empty((0, 0))
        np.save(self.artifact("encoded_test.npy"), np.stack([continuous, discrete], axis=1))
        np.save(self.artifact("encoded_labels.npy"), y.astype(np.int64))
        logger.info(f"Encoded {len(X)} test images for {source} "
                    f"(ticks_per_unit={enc.ticks_per_unit}, T_max={enc.T_max})")
        return StageResult(self.name, True, ["encoded_test.npy", "encoded_labels.npy"],
                           {'images': int(len(X)), 'ticks_per_unit': enc.ticks_per_unit})


class MapStage(PipelineStage):
    @property
    def name(self) -> str:
        return "map"

    async def run(self, **kwargs) -> StageResult:
        cfg = self.config
        net, source = self.load_network()
        placement = map_network(net, cfg.grid, cfg.softmax_output, cfg.bias_as_initial_potential)
        save_placement(placement, self.artifact("placement.yoso"))
        summary = {**placement.summary(), 'network': source}
        write_json(summary, self.artifact("placement_report.json"))
        return StageResult(self.name, True, ["placement.yoso", "placement_report.json"], summary)


def _decode(result: ForwardResult) -> Tuple[int, int]:
    try:
        first = decode_first_spike(result.output)
    except NoDecisionError:
        first = -1
    return first, decode_softmax_membrane(result.final_state)


def _run_reference_chunk(net: TTFSNetwork, times: np.ndarray, mode: str,
                         enc: EncodingConfig, options: SimulationOptions) -> List[ForwardResult]:
    discrete = mode == "discrete"
    return [network_forward(net, SpikeTimeVector(t, discrete=discrete), mode, enc, options)
            for t in times]


def _run_hardware_chunk(placement_path: str, grid: GridConfig, hop_latency: int,
                        times: np.ndarray, T_max: int, early_stop: bool
                        ) -> Tuple[List[ForwardResult], AccessCounters, AccessCounters]:
    """Each worker programs its own system; inference counters exclude programming"""
    system = build_system(load_placement(placement_path, grid.pe), grid.pe, hop_latency)
    programming = AccessCounters()
    programming.merge(system.counters)
    counters = AccessCounters()
    results = []
    for t in times:
        run = system.run_inference(SpikeTimeVector(t, discrete=True), T_max, early_stop)
        counters.merge(run.counters)
        results.append(run.forward)
    return results, counters, programming


class RunStage(PipelineStage):
    @property
    def name(self) -> str:
        return "run"

    async def run(self, backend: str = "ref-disc", **kwargs) -> StageResult:
        cfg = self.config
        if backend not in ("ref-cont", "ref-disc", "hw"):
            raise PipelineConfigError(f"unknown backend {backend}")
        placement_path = self.artifact("placement.yoso")
        if backend == "hw" and not placement_path.exists():
            raise ArtifactMissingError(f"placement missing: {placement_path} (run 'map' first)")
        net, source = self.load_network()
        enc = self.encoding_for(net)
        encoded = np.load(self.require("encoded_test.npy", "encoded test set"))
        labels = np.load(self.require("encoded_labels.npy", "encoded labels"))
        if cfg.test_limit is not None:
            encoded, labels = encoded[:cfg.test_limit], labels[:cfg.test_limit]
        column = 0 if backend == "ref-cont" else 1
        times = encoded[:, column, :] if len(encoded) else np.empty((0, net.layers[0].fan_in))

        chunks = [c for c in np.array_split(np.arange(len(times)), max(cfg.jobs, 1) * 4) if len(c)]
        logger.info(f"Running {len(times)} images on {backend} with {source} ({cfg.jobs} jobs)")
        counters = AccessCounters()
        if backend == "hw":
            outputs = Parallel(n_jobs=cfg.jobs)(
                delayed(_run_hardware_chunk)(str(placement_path), cfg.grid, cfg.hardware.hop_latency,
                                             times[c], enc.T_max, cfg.early_stop)
                for c in tqdm(chunks, desc="hw", disable=not cfg.progress))
            results = []
            for chunk_results, chunk_counters, _ in outputs:
                results.extend(chunk_results)
                counters.merge(chunk_counters)
            if outputs:
                # programming is a one-off cost, count it once
                counters.merge(outputs[0][2])
            counters.write_json(self.artifact("counters_hw.json"), cfg.energy, cfg.hardware.clock_hz)
        else:
            mode = "continuous" if backend == "ref-cont" else "discrete"
            outputs = Parallel(n_jobs=cfg.jobs)(
                delayed(_run_reference_chunk)(net, times[c], mode, enc, cfg.simulation_options)
                for c in tqdm(chunks, desc=backend, disable=not cfg.progress))
            results = [r for chunk in outputs for r in chunk]

        images = np.arange(len(results))
        decoded = [_decode(r) for r in results]
        predictions = prediction_frame(images, labels, [d[0] for d in decoded], [d[1] for d in decoded])
        predictions.to_csv(self.artifact(f"predictions_{backend}.csv"), index=False)
        run_trace_frame(images, results).to_csv(self.artifact(f"trace_{backend}.csv"),
                                                 index=False, float_format="%.17g")
        artifacts = [f"predictions_{backend}.csv", f"trace_{backend}.csv"]
        if backend == "hw":
            artifacts.append("counters_hw.json")
        metrics = {
            'images': int(len(results)),
            'first_spike_accuracy': float((predictions.first_spike == predictions.label).mean())
            if len(results) else None,
            'membrane_accuracy': float((predictions.membrane == predictions.label).mean())
            if len(results) else None,
        }
        return StageResult(self.name, True, artifacts, metrics)


class CompareStage(PipelineStage):
    @property
    def name(self) -> str:
        return "compare"

    async def run(self, left: str = "hw", right: str = "ref-disc", **kwargs) -> StageResult:
        left_path = self.require(f"trace_{left}.csv", f"trace of backend {left}")
        right_path = self.require(f"trace_{right}.csv", f"trace of backend {right}")
        diff = compare_traces(left_path, right_path)
        write_json(diff.to_dict(), self.artifact("compare.json"))
        if not diff.identical:
            logger.error(f"❌ Traces differ: {diff.only_left} rows only in {left}, "
                         f"{diff.only_right} only in {right}")
            return StageResult(self.name, False, ["compare.json"], diff.to_dict(),
                               error="trace mismatch", exit_code=EXIT_MISMATCH)
        logger.info(f"✅ Traces {left} and {right} are identical ({diff.rows_left} spikes)")
        return StageResult(self.name, True, ["compare.json"], diff.to_dict())


class ReportStage(PipelineStage):
    @property
    def name(self) -> str:
        return "report"

    async def run(self, **kwargs) -> StageResult:
        report = build_report(self.out_dir, self.config.to_dict(), self.config.decode)
        write_json(report, self.artifact("report.json"))
        return StageResult(self.name, True, ["report.json"], report.get('accuracy', {}))


# ============================================================================
# FRAMEWORK
# ============================================================================

PIPELINE_ORDER = ["train-ann", "convert", "finetune", "encode", "map",
                  ("run", {'backend': "ref-cont"}), ("run", {'backend': "ref-disc"}),
                  ("run", {'backend': "hw"}), "compare", "report"]


class YosoPipelineFramework:
    """Registers the pipeline stages and runs them by name"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.stages: Dict[str, PipelineStage] = {}

    async def initialize(self):
        logger.info("Initializing YOSO pipeline...")
        for stage in (TrainAnnStage(), ConvertStage(), FinetuneStage(), EncodeStage(),
                      MapStage(), RunStage(), CompareStage(), ReportStage()):
            await self._register_stage(stage)
        for name, stage in self.stages.items():
            await stage.initialize(self.config)

    async def _register_stage(self, stage: PipelineStage):
        self.stages[stage.name] = stage
        logger.debug(f"Registered stage: {stage.name} ({stage.version})")

    async def run_stage(self, name: str, **kwargs) -> StageResult:
        stage = self.stages.get(name)
        if stage is None:
            return StageResult(name, False, error=f"unknown stage {name}", exit_code=EXIT_CONFIG)
        started = time.time()
        logger.info(f"▶️ Stage {name} {kwargs if kwargs else ''}".rstrip())
        try:
            result = await stage.run(**kwargs)
        except ArtifactMissingError as e:
            logger.error(f"Stage {name} failed: {e}")
            result = StageResult(name, False, error=str(e), exit_code=EXIT_MISSING)
        except (PipelineConfigError, FileNotFoundError) as e:
            logger.error(f"Stage {name} failed: {e}")
            result = StageResult(name, False, error=str(e), exit_code=EXIT_CONFIG)
        except (FormatError, ConversionError, MappingError, SimulationFault,
                TrainingDivergenceError, FinetuneDivergenceError, ValueError) as e:
            logger.error(f"Stage {name} failed: {e}")
            result = StageResult(name, False, error=str(e), exit_code=EXIT_FAILURE)
        result.duration_seconds = time.time() - started
        if result.success:
            logger.info(f"✅ Stage {name} done: {', '.join(result.artifacts)}")
        return result

    async def run_pipeline(self) -> List[StageResult]:
        results = []
        for entry in PIPELINE_ORDER:
            name, kwargs = (entry, {}) if isinstance(entry, str) else entry
            result = await self.run_stage(name, **kwargs)
            results.append(result)
            if not result.success:
                break
        return results

    async def stop(self):
        for name, stage in self.stages.items():
            try:
                await stage.cleanup()
            except Exception as e:
                logger.error(f"Error cleaning up stage {name}: {e}")


# ============================================================================
# COMMAND LINE
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml", help="YAML or JSON pipeline config")
    common.add_argument("--seed", type=int, help="random seed (mandatory unless set in the config)")
    common.add_argument("--out", help="artifact directory")
    common.add_argument("--data-dir", dest="data_dir", help="directory holding the MNIST IDX files")
    common.add_argument("--quantize", dest="quantize", action="store_true", default=None)
    common.add_argument("--no-quantize", dest="quantize", action="store_false")
    common.add_argument("--decode", choices=["first-spike", "membrane"])
    common.add_argument("--early-stop", dest="early_stop", action="store_true")
    common.add_argument("--softmax-output", dest="softmax_output", action="store_true")
    common.add_argument("--error-scaled-step", "--alg1-literal", dest="error_scaled_step",
                        action="store_true", help="scale each fine-tuning step by the layer error")
    common.add_argument("--bias-as-initial-potential", dest="bias_as_initial_potential",
                        action="store_true")
    common.add_argument("--limit", type=int, help="only use the first N test images")
    common.add_argument("--jobs", type=int, help="parallel workers for per-image evaluation")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(description="YOSO TTFS toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train-ann", "convert", "finetune", "encode", "map", "report", "pipeline"):
        sub.add_parser(name, parents=[common])
    run = sub.add_parser("run", parents=[common])
    run.add_argument("--backend", choices=["ref-cont", "ref-disc", "hw"], default="ref-disc")
    compare = sub.add_parser("compare", parents=[common])
    compare.add_argument("--left", default="hw")
    compare.add_argument("--right", default="ref-disc")
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


async def run_cli(args: argparse.Namespace) -> int:
    try:
        config = apply_overrides(load_config(args.config), args)
        config.validate()
    except PipelineConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    logging.getLogger().setLevel(getattr(logging, config.log_level.upper(), logging.INFO))

    framework = YosoPipelineFramework(config)
    try:
        await framework.initialize()
        if args.command == "pipeline":
            results = await framework.run_pipeline()
        elif args.command == "run":
            results = [await framework.run_stage("run", backend=args.backend)]
        elif args.command == "compare":
            results = [await framework.run_stage("compare", left=args.left, right=args.right)]
        else:
            results = [await framework.run_stage(args.command)]
    finally:
        await framework.stop()

    for result in results:
        if not result.success:
            return result.exit_code or EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging("DEBUG" if args.verbose else "INFO")
    return asyncio.run(run_cli(args))


if __name__ == "__main__":
    sys.exit(main())
