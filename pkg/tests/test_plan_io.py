import numpy as np
import pandas as pd
import pytest

from mbot_core.distributions import CostSpec, DiscreteDistribution
from mbot_core.minibatch import MinibatchConfig, SparsePlan, plan_subsampled
from mbot_core.plan_io import (
    HEADER,
    PLAN_MAGIC,
    read_plan_binary,
    read_plan_csv,
    write_plan_binary,
    write_plan_csv,
)


class TestPlanCsv:

    def test_triplet_layout(self, tmp_path):
        plan = SparsePlan.from_dense(np.array([[0.5, 0.0], [0.0, 0.5]]))
        path = tmp_path / "plan.csv"
        write_plan_csv(plan, path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["i", "j", "mass"]
        assert frame[["i", "j"]].values.tolist() == [[0, 0], [1, 1]]

    def test_masses_survive_exactly(self, tmp_path, rng):
        a = DiscreteDistribution(rng.random(25))
        b = DiscreteDistribution(rng.random(25))
        plan = plan_subsampled(a, b, CostSpec("abs"), MinibatchConfig(m=3, k=41))
        path = tmp_path / "plan.csv"
        write_plan_csv(plan, path)
        restored = read_plan_csv(path, 25)
        np.testing.assert_array_equal(restored.to_dense(), plan.to_dense())

    def test_out_of_range_indices(self, tmp_path):
        path = tmp_path / "bad.csv"
        pd.DataFrame({"i": [0, 5], "j": [0, 1], "mass": [0.5, 0.5]}).to_csv(path, index=False)
        with pytest.raises(ValueError, match="outside"):
            read_plan_csv(path, 3)

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        pd.DataFrame({"row": [0], "col": [0]}).to_csv(path, index=False)
        with pytest.raises(ValueError, match="missing columns"):
            read_plan_csv(path, 1)


class TestPlanBinary:

    def test_header_and_payload(self, tmp_path):
        matrix = np.eye(3) / 3
        path = tmp_path / "plan.bin"
        write_plan_binary(matrix, path, subsampled=True)
        raw = path.read_bytes()
        assert raw[:8] == PLAN_MAGIC
        assert len(raw) == HEADER.size + 8 * 9
        restored, subsampled = read_plan_binary(path)
        np.testing.assert_array_equal(restored, matrix)
        assert subsampled

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "plan.bin"
        path.write_bytes(HEADER.pack(b"NOTAPLAN", 1, 0) + np.zeros(1).tobytes())
        with pytest.raises(ValueError, match="bad magic"):
            read_plan_binary(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "plan.bin"
        path.write_bytes(HEADER.pack(PLAN_MAGIC, 2, 0) + np.zeros(3).tobytes())
        with pytest.raises(ValueError, match="expected 32"):
            read_plan_binary(path)

    def test_non_square_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="square"):
            write_plan_binary(np.zeros((2, 3)), tmp_path / "plan.bin")
