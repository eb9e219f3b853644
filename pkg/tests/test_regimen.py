#!/usr/bin/env python3
"""
Tests for dose-regimen representation and panels
"""

import pytest

from core.errors import InvalidArgumentError
from core.simulation.regimen import DoseRegimen, RegimenPanel, subregimen, truncate_at_toxicity


class TestDoseRegimen:
    """Regimen construction and validation"""

    def test_from_days_converts_to_hours(self):
        regimen = DoseRegimen.from_days((1, 5), (1, 5), "S1")
        assert regimen.times == (24.0, 120.0)
        assert regimen.days == (1.0, 5.0)
        assert len(regimen) == 2

    @pytest.mark.parametrize("doses,times", [
        ((1, 2), (0,)),
        ((), ()),
        ((1, -2), (0, 24)),
        ((1, 0), (0, 24)),
        ((1, 2), (24, 24)),
        ((1, 2), (48, 24)),
        ((1,), (-1,)),
    ])
    def test_invalid_regimens_rejected(self, doses, times):
        with pytest.raises(InvalidArgumentError):
            DoseRegimen(doses, times)

    def test_invalid_argument_is_value_error(self):
        with pytest.raises(ValueError):
            DoseRegimen((1,), (0, 1))

    def test_placebo_regimen_allowed(self):
        regimen = DoseRegimen((0, 0), (0, 24))
        assert regimen.is_placebo

    def test_dict_round_trip(self, stepped):
        assert DoseRegimen.from_dict(stepped.to_dict()) == stepped

    def test_describe(self):
        assert DoseRegimen((1, 2.5), (0, 24), "S2").describe() == "S2=(1,2.5)"


class TestSubregimen:
    """Prefixes and truncation at toxicity"""

    def test_prefix(self, stepped):
        sub = subregimen(stepped, 3)
        assert sub.doses == (1.0, 5.0, 10.0)
        assert sub.times == stepped.times[:3]

    def test_full_length_returns_same_regimen(self, stepped):
        assert subregimen(stepped, len(stepped)) is stepped

    @pytest.mark.parametrize("j", [0, 8])
    def test_out_of_range(self, stepped, j):
        with pytest.raises(InvalidArgumentError):
            subregimen(stepped, j)

    def test_truncate_at_first_administration(self, stepped):
        received = truncate_at_toxicity(stepped, 1)
        assert received.doses == (1.0,)


class TestRegimenPanel:
    """Panels of regimens"""

    def test_labels_default_to_position(self, short_panel):
        assert short_panel.labels == ["S1", "S2", "S3"]

    def test_explicit_labels_kept(self):
        panel = RegimenPanel.of([DoseRegimen((1,), (0,), "low"), DoseRegimen((2,), (0,))])
        assert panel.labels == ["low", "S2"]

    def test_dose_set_collected(self, short_panel):
        assert short_panel.dose_set == (2.0, 5.0, 10.0, 20.0)

    def test_dose_set_must_cover_doses(self):
        with pytest.raises(InvalidArgumentError):
            RegimenPanel((DoseRegimen((1, 3), (0, 24)),), (1.0, 2.0))

    def test_empty_panel_rejected(self):
        with pytest.raises(InvalidArgumentError):
            RegimenPanel.of([])

    def test_index_of(self, short_panel):
        relabelled = DoseRegimen(short_panel[1].doses, short_panel[1].times, "other label")
        assert short_panel.index_of(relabelled) == 1
        with pytest.raises(InvalidArgumentError):
            short_panel.index_of(DoseRegimen((7,), (0,)))

    def test_dict_round_trip(self, six_panel):
        restored = RegimenPanel.from_dict(six_panel.to_dict())
        assert restored == six_panel
        assert len(restored) == 6
