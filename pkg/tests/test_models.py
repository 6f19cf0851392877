"""
Unit tests for the pyv2xbench models.

Tests the RecordModel base class, value coercion and the domain value types.
"""

from dataclasses import dataclass, field

import numpy as np
import pytest

from pyv2xbench.exceptions import ConfigurationError
from pyv2xbench.models import (
    Action,
    Algorithm,
    CdsReport,
    ChannelParams,
    DatasetSpec,
    DistanceLevel,
    EquilibriumSet,
    EvaluationRecord,
    HighwayConfig,
    NormalizationBounds,
    QueueState,
    RecordModel,
    ResultCell,
    ResultTable,
    RewardWeights,
    SamplingMode,
    Task,
    VehicleRecord,
    VehicleRole,
    coerce_value,
    db_to_linear,
)


class TestRecordModel:
    """Test the RecordModel base class functionality."""

    def test_from_record_requires_dataclass(self):
        """Test that from_record requires a dataclass."""

        class NotADataclass(RecordModel):
            pass

        with pytest.raises(ValueError, match="must be a dataclass"):
            NotADataclass.from_record([])

    def test_from_record_maps_fields_in_order(self):
        """Test columns are mapped to fields in declaration order."""

        @dataclass
        class Row(RecordModel):
            id: int = field(default=0)
            name: str | None = field(default=None)
            price: float | None = field(default=None)

        row = Row.from_record(["7", "lamp", "1.5"])
        assert row.id == 7
        assert row.name == "lamp"
        assert row.price == 1.5

    def test_from_record_wrong_column_count(self):
        """Test a record with the wrong width is rejected."""
        with pytest.raises(ValueError, match="expected 12 columns"):
            VehicleRecord.from_record(["1", "2"])

    def test_from_record_reports_bad_column(self):
        """Test conversion errors name the column."""
        values = ["0", "1", "not-a-role", "0", "1", "2", "0", "3", "35", "", "-1", "0"]
        with pytest.raises(ValueError, match="role"):
            VehicleRecord.from_record(values)

    def test_vehicle_record_parses_optional_enum(self):
        """Test empty distance levels become None and set ones become enums."""
        base = ["0", "1", "v2v_rx", "0", "1.0", "2.0", "1", "3.0", "123.0"]
        empty = VehicleRecord.from_record([*base, "", "-1", "0"])
        close = VehicleRecord.from_record([*base, "close", "-1", "0"])
        assert empty.distance_level is None
        assert close.distance_level is DistanceLevel.CLOSE
        assert close.role is VehicleRole.V2V_RX

    def test_field_names(self):
        """Test column names follow declaration order."""
        names = VehicleRecord.field_names()
        assert names[:3] == ["sample_id", "vehicle_id", "role"]
        assert names[-1] == "step_in_rollout"


class TestCoerceValue:
    """Test text-to-type coercion."""

    def test_bool_text(self):
        """Test boolean spellings."""
        assert coerce_value("yes", bool) is True
        assert coerce_value("0", bool) is False
        with pytest.raises(ValueError):
            coerce_value("maybe", bool)

    def test_float_tuple(self):
        """Test comma separated tuples of floats."""
        assert coerce_value("23, 15,5,-100", tuple[float, ...]) == (23.0, 15.0, 5.0, -100.0)

    def test_optional_tuple(self):
        """Test an optional tuple accepts both text and empty values."""
        assert coerce_value("1,2", tuple[float, float] | None) == (1.0, 2.0)
        assert coerce_value("", tuple[float, float] | None) is None

    def test_required_empty_value(self):
        """Test an empty value for a required field raises."""
        with pytest.raises(ValueError, match="empty value"):
            coerce_value("", int)

    def test_non_text_passes_through(self):
        """Test already typed values are returned unchanged."""
        assert coerce_value(3, float) == 3
        assert coerce_value(True, bool) is True

    def test_yaml_list(self):
        """Test YAML lists become typed tuples and integers become floats."""
        levels = coerce_value([23, 10, 5, -100], tuple[float, ...])
        assert levels == (23.0, 10.0, 5.0, -100.0)
        assert all(type(level) is float for level in levels)
        assert coerce_value([0, "2"], tuple[int, ...]) == (0, 2)
        assert type(coerce_value(20, float)) is float
        with pytest.raises(ValueError, match="unexpected list"):
            coerce_value([1, 2], int)

    def test_enum(self):
        """Test enum coercion by value."""
        assert coerce_value("posig", Task) is Task.POSIG


class TestEnums:
    """Test task and algorithm properties."""

    def test_task_properties(self):
        """Test the task flags."""
        assert Task.NFIG.is_single_location
        assert not Task.SIG_ML.is_single_location
        assert Task.SIG_SL_FF.fast_fading
        assert not Task.SIG_SL_NFF.fast_fading
        assert Task.POSIG.partially_observable
        assert Task.NFIG.default_horizon == 1
        assert Task.SIG_ML.default_horizon == 50

    def test_algorithm_properties(self):
        """Test the algorithm families."""
        assert {a for a in Algorithm if a.value_based} == {
            Algorithm.IDQN,
            Algorithm.HYS_IDQN,
            Algorithm.VDN,
            Algorithm.QMIX,
        }
        assert {a for a in Algorithm if a.proximal} == {Algorithm.IPPO, Algorithm.MAPPO}
        assert Algorithm.MAA2C.centralized
        assert not Algorithm.IA2C.centralized

    def test_distance_levels(self):
        """Test target BS distances."""
        assert [d.mean_distance for d in DistanceLevel] == [100.0, 500.0, 1000.0]


class TestHighwayConfig:
    """Test highway geometry validation."""

    def test_defaults(self):
        """Test the default scenario."""
        config = HighwayConfig()
        assert config.n_lanes == 6
        assert config.base_station == (0.0, -35.0)
        assert config.lane_y(0) == 2.0
        assert config.direction(2) == 1
        assert config.direction(3) == -1
        assert config.speed_ms == pytest.approx(250 / 3.6)
        assert config.mean_spacing == pytest.approx(1000 / 35)

    def test_rejects_unpaired_density(self):
        """Test density/speed pairs outside the scenarios are rejected."""
        with pytest.raises(ConfigurationError, match="allow_custom_density"):
            HighwayConfig(density=123.0, speed=250.0)

    def test_custom_density_allowed(self):
        """Test the custom density escape hatch."""
        config = HighwayConfig(density=80.0, speed=100.0, allow_custom_density=True)
        assert config.density == 80.0

    def test_for_density(self):
        """Test building a config from a density level."""
        assert HighwayConfig.for_density(500).speed == 50.0
        with pytest.raises(ConfigurationError):
            HighwayConfig.for_density(42)

    def test_rejects_nonpositive_gap(self):
        """Test the minimum gap must be positive."""
        with pytest.raises(ConfigurationError, match="min_gap"):
            HighwayConfig(min_gap=0.0)

    def test_explicit_base_station(self):
        """Test an explicit BS position wins over the default."""
        assert HighwayConfig(bs_position=(1000.0, -20.0)).base_station == (1000.0, -20.0)


class TestChannelParams:
    """Test radio parameter helpers."""

    def test_power_levels(self):
        """Test the silent level maps to exactly zero."""
        params = ChannelParams()
        mw = params.power_levels_mw
        assert mw[-1] == 0.0
        assert mw[0] == pytest.approx(10**2.3)
        assert params.silent_power_level == 3
        assert params.n_actions == 16

    def test_noise_power(self):
        """Test dBm to mW conversion."""
        assert ChannelParams().noise_power_mw == pytest.approx(10**-11.4)
        assert db_to_linear(0.0) == 1.0

    def test_cam_size(self):
        """Test the CAM size of six 1060-byte messages."""
        assert ChannelParams().cam_size_bits == 50880

    def test_requires_silent_level(self):
        """Test the power levels must include -100 dBm."""
        with pytest.raises(ConfigurationError, match="silent"):
            ChannelParams(power_levels_dbm=(23.0, 15.0))

    def test_requires_descending_levels(self):
        """Test the power levels must be descending."""
        with pytest.raises(ConfigurationError, match="descending"):
            ChannelParams(power_levels_dbm=(5.0, 23.0, -100.0))


class TestSmallTypes:
    """Test actions, queues, weights and specs."""

    def test_action_index_round_trip(self):
        """Test the flat action layout."""
        assert Action(2, 1).index(4) == 9
        assert Action.from_index(9, 4) == Action(2, 1)

    def test_initial_queue(self):
        """Test the initial queue is full at t=0."""
        queue = QueueState.initial(3)
        np.testing.assert_array_equal(queue.q, np.ones(3))
        assert queue.t == 0

    def test_reward_weights(self):
        """Test the task weight presets."""
        assert RewardWeights.nfig().completion_bonus == 0.0
        sig = RewardWeights.sig()
        assert (sig.lambda_v2i, sig.lambda_v2v, sig.completion_bonus) == (0.2, 1.8, 0.5)

    def test_dataset_spec_validation(self):
        """Test dataset sizes must be positive."""
        assert DatasetSpec(10).sampling_mode is SamplingMode.RANDOM
        with pytest.raises(ConfigurationError):
            DatasetSpec(0)


class TestResults:
    """Test bounds, equilibria and result containers."""

    def test_bounds_dict_round_trip(self):
        """Test bounds survive to_dict/from_dict."""
        bounds = NormalizationBounds(1.0, 3.0, Task.SIG_ML, "test_set", 0.1, 200)
        restored = NormalizationBounds.from_dict(bounds.to_dict())
        assert restored == bounds
        assert not restored.degenerate

    def test_degenerate_bounds(self):
        """Test equal anchors are degenerate."""
        assert NormalizationBounds(2.0, 2.0).degenerate

    def test_equilibrium_statistics(self):
        """Test max, min and mean over normalized returns."""
        eq = EquilibriumSet(joint_actions=[(0,), (1,)], returns=[1.0, 0.5])
        assert eq.g_ne_max == 1.0
        assert eq.g_ne_min == 0.5
        assert eq.g_ne_mean == 0.75
        assert EquilibriumSet().empty

    def test_cds_report_dict(self):
        """Test the report uses the cds key."""
        report = CdsReport("35_far", 0.25, 2, 1.0, 0.8, 0.9)
        assert report.to_dict()["cds"] == 0.25

    def test_evaluation_record_means(self):
        """Test raw and normalized means."""
        record = EvaluationRecord(0, 1, 10, ["a", "b"], [1.0, 3.0], [0.2, 0.4])
        assert record.mean_return == 2.0
        assert record.normalized_return == pytest.approx(0.3)
        assert np.isnan(EvaluationRecord(0, 0, 0).mean_return)

    def test_result_cell_formatting(self):
        """Test the two-decimal rendering."""
        cell = ResultCell("nfig_123_close", "vdn", 0.8765, 0.0432, 3)
        assert cell.formatted == "0.88 ± 0.04"

    def test_result_table_lookup(self):
        """Test cell lookup by task and algorithm."""
        cell = ResultCell("sig_ml", "qmix", 0.5, 0.1, 0)
        table = ResultTable([cell])
        assert table.cell("sig_ml", "qmix") is cell
        with pytest.raises(KeyError):
            table.cell("sig_ml", "vdn")
