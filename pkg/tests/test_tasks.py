import gzip
import struct

import numpy as np
import pytest

from ssmreduce.exceptions import ConfigError, FormatError
from ssmreduce.lti import simulate
from ssmreduce.tasks import delayed_copy, make_task, mnist_seq, read_idx, teacher_lti, teacher_outputs
from ssmreduce.train import ReductionPolicy, TrainConfig, train_run


def write_idx(path, magic, arr, compress=False):
    head = struct.pack(">I", magic) + struct.pack(">" + "I" * arr.ndim, *arr.shape)
    data = head + arr.astype(np.uint8).tobytes()
    (gzip.open if compress else open)(path, "wb").write(data)


class TestIdx:
    def test_images_and_labels(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (3, 4, 5))
        write_idx(tmp_path / "i", 0x803, imgs)
        write_idx(tmp_path / "l.gz", 0x801, np.array([1, 2, 3]), compress=True)
        assert np.array_equal(read_idx(tmp_path / "i"), imgs)
        assert np.array_equal(read_idx(tmp_path / "l.gz"), [1, 2, 3])

    def test_bad_magic(self, tmp_path):
        write_idx(tmp_path / "x", 0x802, np.zeros((2, 2)))
        with pytest.raises(FormatError):
            read_idx(tmp_path / "x")

    def test_truncated(self, tmp_path):
        (tmp_path / "t").write_bytes(struct.pack(">II", 0x801, 10) + b"\x00")
        with pytest.raises(FormatError):
            read_idx(tmp_path / "t")

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nothere"):
            read_idx(tmp_path / "nothere")

    def test_mnist_loader(self, tmp_path, rng):
        write_idx(tmp_path / "train-images-idx3-ubyte", 0x803, rng.integers(0, 256, (6, 4, 4)))
        write_idx(tmp_path / "train-labels-idx1-ubyte", 0x801, rng.integers(0, 10, 6))
        write_idx(tmp_path / "t10k-images-idx3-ubyte.gz", 0x803, rng.integers(0, 256, (2, 4, 4)), True)
        write_idx(tmp_path / "t10k-labels-idx1-ubyte.gz", 0x801, rng.integers(0, 10, 2), True)
        d = mnist_seq(tmp_path, row_stride=2, n_train=5)
        x, y = d.batch(np.arange(2))
        assert x.shape == (2, 8, 1) and x.max() <= 1.0 and d.n_train == 5 and d.d_out == 10


class TestDelayedCopy:
    def test_label_is_token_k_from_end(self):
        d = delayed_copy(seed=3, L=20, k=5, V=4, n_train=50, n_test=10)
        assert np.array_equal(d.train_y, d.train_x[:, 15])
        assert np.array_equal(d.test_y, d.test_x[:, 15])

    def test_one_hot_features(self):
        d = delayed_copy(seed=0, L=6, k=1, V=3, n_train=4, n_test=2)
        x, y = d.batch(np.arange(4))
        assert x.shape == (4, 6, 3) and np.array_equal(x.sum(-1), np.ones((4, 6)))
        assert np.array_equal(np.argmax(x[:, -1], -1), y)

    def test_seeded(self):
        a = delayed_copy(seed=1, L=8, k=2, n_train=10, n_test=2)
        b = delayed_copy(seed=1, L=8, k=2, n_train=10, n_test=2)
        assert np.array_equal(a.train_x, b.train_x)

    def test_bad_delay(self):
        with pytest.raises(ConfigError):
            delayed_copy(L=8, k=9)


class TestTeacher:
    def test_outputs_follow_teacher(self):
        d = teacher_lti(seed=0, r_true=3, L=30, n_train=4, n_test=2)
        t = d.info["teacher"]
        assert t.n == 3 and t.is_stable
        for i in range(4):
            assert np.allclose(simulate(t, d.train_x[i].T).T, d.train_y[i], atol=1e-12)
        assert np.allclose(teacher_outputs(t, d.train_x), d.train_y)

    def test_unit_scale_and_noise(self):
        clean = teacher_lti(seed=0, n_train=256, n_test=64)
        noisy = teacher_lti(seed=0, n_train=256, n_test=64, noise=0.1)
        y = np.concatenate([clean.train_y, clean.test_y])
        assert np.std(y) == pytest.approx(1.0)
        assert np.std(noisy.train_y - clean.train_y) == pytest.approx(0.1, rel=0.05)

    def test_full_order_student_realizes_teacher(self):
        c = TrainConfig(depth=1, H=1, n=32, steps=1500, batch=32, base_lr=0.01, seed=0, norm="none",
                        activation="identity", task={"name": "teacher_lti", "r_true": 4, "L": 64, "noise": 0.0},
                        policy=ReductionPolicy(enabled=False), track_every=0)
        rec = train_run(c)
        tail = np.mean(rec.losses[-100:])
        # unit-variance targets, so the training MSE is the training NMSE
        assert tail <= 1e-3
        assert rec.final_eval["nmse"] <= 1e-3


class TestMakeTask:
    def test_keys_and_seed(self):
        d = make_task({"name": "delayed_copy", "n-train": 12, "n_test": 3, "L": 8, "k": 2}, seed=4)
        assert d.n_train == 12 and np.array_equal(d.train_x, delayed_copy(4, L=8, k=2, n_train=12, n_test=3).train_x)

    def test_unknown(self):
        with pytest.raises(ConfigError) as err:
            make_task({"name": "imagenet"})
        assert err.value.path == "task.name"

    def test_batches_cycle(self, rng):
        d = delayed_copy(seed=0, L=4, k=1, n_train=10, n_test=3)
        it = d.batches(rng, 4)
        seen = [next(it)[0].shape for _ in range(5)]
        assert all(s == (4, 4, 8) for s in seen)
        assert sum(len(y) for _, y in d.test_batches(2)) == 3
