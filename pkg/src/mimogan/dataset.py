"""Impulse-probing measurement datasets: generation, split, binary storage and channel dumps."""

from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np
from eliot import start_action
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from mimogan import __version__
from mimogan.channel import DEFAULT_SAMPLE_RATE_HZ, ChannelRealizationConfig, sample_channels
from mimogan.container import CHANNELS_MAGIC, DATASET_MAGIC, read_container, write_container
from mimogan.errors import ConfigurationError, ContractViolationError, TruncatedFileError
from mimogan.tensor import ChannelTensor, Waveform, convolve_batch

TRAIN_FRACTION = 0.6
VAL_FRACTION = 0.2
# spawn key of the split permutation, outside the range of realization ids
SPLIT_STREAM = 2**63 - 1
DEFAULT_CHUNK = 512


class ProbingMode(str, Enum):
    SEQUENTIAL = "sequential"
    SIMULTANEOUS = "simultaneous"


def n_probes(mode: ProbingMode, n_tx: int) -> int:
    return n_tx if ProbingMode(mode) == ProbingMode.SEQUENTIAL else 1


def probe_array(mode: ProbingMode, n_tx: int, n_samples: int) -> np.ndarray:
    """Probe inputs as one array of shape (K, n_tx, T)."""
    if n_tx < 1 or n_samples < 1:
        raise ContractViolationError(f"n_tx and T must be positive, got {n_tx} and {n_samples}")
    if ProbingMode(mode) == ProbingMode.SEQUENTIAL:
        x = np.zeros((n_tx, n_tx, n_samples), dtype=np.complex128)
        x[np.arange(n_tx), np.arange(n_tx), 0] = 1.0
    else:
        x = np.zeros((1, n_tx, n_samples), dtype=np.complex128)
        x[0, :, 0] = 1.0
    return x


def make_probe(mode: ProbingMode, n_tx: int, n_samples: int, sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> list[Waveform]:
    """
    Unit impulse probes.

    Sequential mode gives n_tx waveforms, the k-th carrying x_k[0] = 1 on antenna k only.
    Simultaneous mode gives a single waveform with x_j[0] = 1 on every antenna.
    """
    return [Waveform(data=x, sample_rate_hz=sample_rate_hz) for x in probe_array(mode, n_tx, n_samples)]


class Measurement(BaseModel):
    """Probing record of one channel realization."""

    realization_id: int = Field(ge=0, description="Index of the channel realization")
    mode: ProbingMode = Field(description="Probing mode")
    inputs: list[Waveform] = Field(description="Probe waveforms, N_T x T each")
    outputs: list[Waveform] = Field(description="Received waveforms, one per input, N_R x T each")

    @model_validator(mode="after")
    def _check_pairs(self) -> "Measurement":
        if len(self.inputs) != len(self.outputs):
            raise ContractViolationError(f"{len(self.inputs)} inputs but {len(self.outputs)} outputs")
        return self


class DatasetSplit(BaseModel):
    """Disjoint train/val/test measurement indices."""

    train: list[int] = Field(description="Training measurement indices")
    val: list[int] = Field(description="Validation measurement indices")
    test: list[int] = Field(description="Test measurement indices")

    @model_validator(mode="after")
    def _check_disjoint(self) -> "DatasetSplit":
        union = set(self.train) | set(self.val) | set(self.test)
        if len(union) != len(self.train) + len(self.val) + len(self.test):
            raise ContractViolationError("split index sets overlap")
        return self

    @property
    def count(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)

    def indices(self, name: str) -> list[int]:
        if name not in ("train", "val", "test"):
            raise ContractViolationError(f"unknown split '{name}'")
        return getattr(self, name)

    @classmethod
    def from_seed(cls, count: int, seed: int) -> "DatasetSplit":
        """60/20/20 split of a seeded permutation: floor for train and val, remainder to test."""
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(SPLIT_STREAM,))))
        order = rng.permutation(count)
        n_train = int(np.floor(count * TRAIN_FRACTION))
        n_val = int(np.floor(count * VAL_FRACTION))
        return cls(
            train=sorted(order[:n_train].tolist()),
            val=sorted(order[n_train:n_train + n_val].tolist()),
            test=sorted(order[n_train + n_val:].tolist()),
        )


class ProbingDataset(BaseModel):
    """Received outputs of every measurement, stored at complex64 precision."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    channel: ChannelRealizationConfig = Field(description="Configuration of the ground-truth channel")
    mode: ProbingMode = Field(description="Probing mode used for every measurement")
    seed: int = Field(ge=0, description="Dataset seed: realization streams and split")
    n_samples: int = Field(gt=0, description="Samples per waveform T")
    split: DatasetSplit = Field(description="Train/val/test indices")
    outputs: np.ndarray = Field(description="complex64 outputs, shape (count, K, N_R, T)")

    @field_validator("outputs", mode="before")
    @classmethod
    def _check_outputs(cls, value: Any) -> np.ndarray:
        array = np.asarray(value, dtype=np.complex64)
        if array.ndim != 4:
            raise ContractViolationError(f"outputs must be (count, K, N_R, T), got {array.shape}")
        array.flags.writeable = False
        return array

    @model_validator(mode="after")
    def _check_shapes(self) -> "ProbingDataset":
        expected = (self.split.count, n_probes(self.mode, self.channel.n_tx), self.channel.n_rx, self.n_samples)
        if self.outputs.shape != expected:
            raise ContractViolationError(f"outputs have shape {self.outputs.shape}, expected {expected}")
        return self

    @property
    def count(self) -> int:
        return int(self.outputs.shape[0])

    @property
    def n_probes(self) -> int:
        return int(self.outputs.shape[1])

    def __len__(self) -> int:
        return self.count

    def probes(self) -> np.ndarray:
        return probe_array(self.mode, self.channel.n_tx, self.n_samples)

    def output_tensor(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """complex128 outputs of the given measurements, shape (M, K, N_R, T)."""
        selected = self.outputs if indices is None else self.outputs[np.asarray(indices, dtype=np.int64)]
        return selected.astype(np.complex128)

    def measurement(self, index: int) -> Measurement:
        sample_rate = self.channel.sample_rate_hz
        return Measurement(
            realization_id=index,
            mode=self.mode,
            inputs=make_probe(self.mode, self.channel.n_tx, self.n_samples, sample_rate),
            outputs=[Waveform(data=y, sample_rate_hz=sample_rate) for y in self.output_tensor([index])[0]],
        )

    def __iter__(self) -> Iterator[Measurement]:
        for index in range(self.count):
            yield self.measurement(index)

    def reference_channels(self, indices: Sequence[int], threads: int = 1) -> np.ndarray:
        """Re-simulate the exact ground-truth realizations behind the given measurements."""
        return sample_channels(self.channel, indices, threads=threads)

    def manifest(self) -> dict:
        return {
            "kind": "probing-dataset",
            "package_version": __version__,
            "channel": self.channel.model_dump(mode="json"),
            "config_hash": self.channel.config_hash(),
            "mode": self.mode.value,
            "seed": self.seed,
            "count": self.count,
            "n_probes": self.n_probes,
            "n_rx": self.channel.n_rx,
            "n_tx": self.channel.n_tx,
            "n_samples": self.n_samples,
            "payload": {"dtype": "complex64-le-interleaved", "shape": list(self.outputs.shape)},
            "split": self.split.model_dump(),
        }


def generate_dataset(
    cfg: ChannelRealizationConfig,
    mode: ProbingMode,
    count: int,
    seed: int,
    n_samples: int = 128,
    threads: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
) -> ProbingDataset:
    """
    Probe `count` fresh channel realizations.

    Realization m uses stream m of `seed`, so the result does not depend on threads or chunk_size.
    """
    if count < 1:
        raise ConfigurationError(f"count must be positive, got {count}")
    mode = ProbingMode(mode)
    cfg = cfg.model_copy(update={"rng_seed": seed})
    probes = probe_array(mode, cfg.n_tx, n_samples)
    with start_action(action_type="generate_dataset", profile=cfg.profile.name, mimo=cfg.mimo, mode=mode.value, count=count, seed=seed) as action:
        outputs = np.empty((count, probes.shape[0], cfg.n_rx, n_samples), dtype=np.complex64)
        for start in range(0, count, chunk_size):
            ids = range(start, min(start + chunk_size, count))
            channels = sample_channels(cfg, ids, threads=threads)
            outputs[start:start + len(ids)] = convolve_batch(channels, probes)
        action.add_success_fields(config_hash=cfg.config_hash())
        return ProbingDataset(
            channel=cfg,
            mode=mode,
            seed=seed,
            n_samples=n_samples,
            split=DatasetSplit.from_seed(count, seed),
            outputs=outputs,
        )


def _chunks(array: np.ndarray, dtype: str, rows: int = DEFAULT_CHUNK) -> Iterator[bytes]:
    for start in range(0, array.shape[0], rows):
        yield np.ascontiguousarray(array[start:start + rows], dtype=dtype).tobytes()


def save_dataset(dataset: ProbingDataset, path: Union[str, Path]) -> Path:
    with start_action(action_type="save_dataset", path=str(path), count=dataset.count):
        return write_container(
            path, DATASET_MAGIC, dataset.manifest(), _chunks(dataset.outputs, "<c8"), dataset.outputs.size * 8
        )


def _payload_array(payload: bytes, dtype: str, shape: Sequence[int], path: Path) -> np.ndarray:
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise TruncatedFileError(f"payload holds {len(payload)} bytes, manifest shape {list(shape)} needs {expected}", path)
    return np.frombuffer(payload, dtype=dtype).reshape(shape)


def load_dataset(path: Union[str, Path]) -> ProbingDataset:
    """
    Load a dataset written by save_dataset.

    Raises:
        BadMagicError, VersionMismatchError, TruncatedFileError, ChecksumError
    """
    path = Path(path)
    with start_action(action_type="load_dataset", path=str(path)) as action:
        manifest, payload = read_container(path, DATASET_MAGIC)
        shape = manifest["payload"]["shape"]
        dataset = ProbingDataset(
            channel=ChannelRealizationConfig.model_validate(manifest["channel"]),
            mode=ProbingMode(manifest["mode"]),
            seed=manifest["seed"],
            n_samples=manifest["n_samples"],
            split=DatasetSplit.model_validate(manifest["split"]),
            outputs=_payload_array(payload, "<c8", shape, path),
        )
        action.add_success_fields(count=dataset.count, mode=dataset.mode.value, mimo=dataset.channel.mimo)
        return dataset


def save_channels(path: Union[str, Path], channels: np.ndarray, sample_rate_hz: float, metadata: Optional[dict] = None) -> Path:
    """Dump a stack of channel realizations (M, N_R, N_T, L) at complex128 precision."""
    channels = np.asarray(channels, dtype=np.complex128)
    if channels.ndim != 4:
        raise ContractViolationError(f"channels must be (M, N_R, N_T, L), got {channels.shape}")
    manifest = {
        "kind": "channel-samples",
        "package_version": __version__,
        "shape": list(channels.shape),
        "sample_rate_hz": sample_rate_hz,
        "dtype": "complex128-le-interleaved",
        "metadata": metadata or {},
    }
    with start_action(action_type="save_channels", path=str(path), count=channels.shape[0]):
        return write_container(path, CHANNELS_MAGIC, manifest, _chunks(channels, "<c16"), channels.size * 16)


def load_channels(path: Union[str, Path]) -> tuple[list[ChannelTensor], dict]:
    """Load a channel dump, returning ChannelTensor values and the manifest."""
    path = Path(path)
    manifest, payload = read_container(path, CHANNELS_MAGIC)
    array = _payload_array(payload, "<c16", manifest["shape"], path)
    rate = manifest["sample_rate_hz"]
    return [ChannelTensor(data=h, sample_rate_hz=rate) for h in array], manifest
