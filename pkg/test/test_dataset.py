"""Tests for probing datasets and the binary container."""

import struct

import numpy as np
import pytest

from conftest import small_config
from mimogan.channel import sample_channels
from mimogan.container import DATASET_MAGIC, read_container, write_container
from mimogan.dataset import (
    DatasetSplit,
    ProbingMode,
    generate_dataset,
    load_channels,
    load_dataset,
    make_probe,
    save_channels,
    save_dataset,
)
from mimogan.errors import BadMagicError, ChecksumError, ConfigurationError, ContainerError, TruncatedFileError, VersionMismatchError


def test_sequential_probes_excite_one_antenna():
    probes = make_probe(ProbingMode.SEQUENTIAL, 3, 8)
    assert len(probes) == 3
    for k, probe in enumerate(probes):
        expected = np.zeros((3, 8))
        expected[k, 0] = 1.0
        assert np.array_equal(probe.data, expected), f"probe {k} must be an impulse on antenna {k}"


def test_simultaneous_probe_excites_every_antenna():
    (probe,) = make_probe(ProbingMode.SIMULTANEOUS, 3, 8)
    assert np.array_equal(probe.data[:, 0], [1, 1, 1])
    assert np.all(probe.data[:, 1:] == 0)


def test_sequential_outputs_are_channel_columns(config_2x2):
    dataset = generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=5, seed=3, n_samples=20)
    h = dataset.reference_channels(range(5))
    assert dataset.outputs.shape == (5, 2, 2, 20)
    for k in range(2):
        assert np.allclose(dataset.outputs[:, k, :, :16], h[:, :, k, :], atol=1e-6), f"probe {k} reads column {k}"
    assert np.allclose(dataset.outputs[:, :, :, 16:], 0.0)


def test_simultaneous_outputs_sum_links(config_2x2):
    dataset = generate_dataset(config_2x2, ProbingMode.SIMULTANEOUS, count=4, seed=1, n_samples=16)
    h = dataset.reference_channels(range(4))
    assert dataset.n_probes == 1
    assert np.allclose(dataset.outputs[:, 0], h.sum(axis=2), atol=1e-6)


def test_dataset_independent_of_threads_and_chunks(config_2x2):
    base = generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=12, seed=5, n_samples=16)
    other = generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=12, seed=5, n_samples=16, threads=3, chunk_size=5)
    assert np.array_equal(base.outputs, other.outputs)
    assert base.split == other.split


def test_repeated_generation_writes_identical_files(tmp_path, config_2x2):
    first = save_dataset(generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=12, seed=5, n_samples=16), tmp_path / "a.mgd")
    second = save_dataset(generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=12, seed=5, n_samples=16, threads=3, chunk_size=5), tmp_path / "b.mgd")
    assert first.read_bytes() == second.read_bytes()


def test_split_is_rederived_from_the_stored_seed(tmp_path, config_2x2):
    path = save_dataset(generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=10, seed=7, n_samples=16), tmp_path / "d.mgd")
    manifest, _ = read_container(path, DATASET_MAGIC)
    assert DatasetSplit.model_validate(manifest["split"]) == DatasetSplit.from_seed(manifest["count"], manifest["seed"])
    assert load_dataset(path).split == DatasetSplit.from_seed(10, 7)


def test_dataset_uses_its_own_seed(config_2x2):
    dataset = generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=3, seed=11, n_samples=16)
    assert dataset.channel.rng_seed == 11
    expected = sample_channels(config_2x2.model_copy(update={"rng_seed": 11}), [2])
    assert np.allclose(dataset.reference_channels([2]), expected)


def test_count_must_be_positive(config_2x2):
    with pytest.raises(ConfigurationError):
        generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=0, seed=0)


@pytest.mark.parametrize("count,sizes", [(10, (6, 2, 2)), (7, (4, 1, 2)), (1, (0, 0, 1))])
def test_split_sizes(count, sizes):
    split = DatasetSplit.from_seed(count, seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == sizes
    assert sorted(split.train + split.val + split.test) == list(range(count)), "splits cover every index once"


def test_overlapping_split_rejected():
    with pytest.raises(ValueError):
        DatasetSplit(train=[0, 1], val=[1], test=[2])


def test_measurements_pair_inputs_and_outputs(config_2x2):
    dataset = generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=2, seed=0, n_samples=16)
    measurements = list(dataset)
    assert len(measurements) == 2
    assert len(measurements[0].inputs) == len(measurements[0].outputs) == 2
    assert measurements[1].outputs[0].antennas == 2


def test_save_and_load(tmp_path, config_2x2):
    dataset = generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=6, seed=2, n_samples=16)
    path = save_dataset(dataset, tmp_path / "data" / "dataset.mgd")
    loaded = load_dataset(path)
    assert np.array_equal(loaded.outputs, dataset.outputs)
    assert loaded.channel.config_hash() == dataset.channel.config_hash()
    assert loaded.split == dataset.split
    assert np.array_equal(loaded.reference_channels([3]), dataset.reference_channels([3])), "ground truth is reproducible from the file"


def _saved(tmp_path, config) -> bytes:
    dataset = generate_dataset(config, ProbingMode.SEQUENTIAL, count=3, seed=0, n_samples=16)
    return save_dataset(dataset, tmp_path / "dataset.mgd").read_bytes()


def test_corrupted_files_are_detected(tmp_path, config_2x2):
    original = _saved(tmp_path, config_2x2)
    path = tmp_path / "broken.mgd"

    flipped = bytearray(original)
    flipped[-10] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError):
        load_dataset(path)

    path.write_bytes(original[:-2])
    with pytest.raises(TruncatedFileError):
        load_dataset(path)

    path.write_bytes(b"NOT-A-DATASE" + original[12:])
    with pytest.raises(BadMagicError):
        load_dataset(path)

    path.write_bytes(original[:12] + struct.pack("<I", 99) + original[16:])
    with pytest.raises(VersionMismatchError):
        load_dataset(path)


def test_container_checks_declared_length(tmp_path):
    with pytest.raises(Exception, match="declared"):
        write_container(tmp_path / "x.bin", DATASET_MAGIC, {}, [b"abc"], 5)
    write_container(tmp_path / "ok.bin", DATASET_MAGIC, {"a": 1}, [b"ab", b"c"], 3)
    assert read_container(tmp_path / "ok.bin", DATASET_MAGIC) == ({"a": 1}, b"abc")


def test_failed_write_keeps_the_previous_file(tmp_path):
    path = write_container(tmp_path / "d.bin", DATASET_MAGIC, {"a": 1}, [b"abc"], 3)
    before = path.read_bytes()

    def failing_chunks():
        yield b"xy"
        raise OSError("disk full")

    with pytest.raises(ContainerError, match="disk full"):
        write_container(path, DATASET_MAGIC, {"a": 2}, failing_chunks(), 4)
    assert path.read_bytes() == before
    assert sorted(p.name for p in tmp_path.iterdir()) == ["d.bin"], "no partial file is left behind"

    with pytest.raises(ContainerError, match="declared"):
        write_container(path, DATASET_MAGIC, {"a": 3}, [b"ab"], 3)
    assert path.read_bytes() == before


def test_channel_dump(tmp_path, config_2x2):
    channels = sample_channels(config_2x2, range(3))
    save_channels(tmp_path / "h.mgc", channels, config_2x2.sample_rate_hz, {"seed": 0})
    loaded, manifest = load_channels(tmp_path / "h.mgc")
    assert len(loaded) == 3
    assert np.array_equal(loaded[1].data, channels[1]), "channel dumps keep complex128 precision"
    assert manifest["metadata"] == {"seed": 0}

    save_channels(tmp_path / "empty.mgc", channels[:0], config_2x2.sample_rate_hz)
    empty, manifest = load_channels(tmp_path / "empty.mgc")
    assert empty == [] and manifest["shape"] == [0, 2, 2, 16]


def test_iteration_yields_every_measurement(config_2x2):
    dataset = generate_dataset(config_2x2, ProbingMode.SEQUENTIAL, count=3, seed=2, n_samples=12)
    measurements = list(dataset)
    assert [m.realization_id for m in measurements] == [0, 1, 2]
    for m in measurements:
        assert len(m.inputs) == len(m.outputs) == config_2x2.n_tx
        outputs = np.stack([y.data for y in m.outputs])
        assert np.array_equal(outputs, dataset.output_tensor([m.realization_id])[0])
