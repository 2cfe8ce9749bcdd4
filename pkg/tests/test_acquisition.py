import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from angiokit.acquisition import (
    VIEW_SAMPLING_BOXES,
    assign_phases,
    classify_view,
    pair_videos_reports,
    select_diagnostic,
)
from angiokit.errors import ValidationError
from angiokit.types import (
    SEGMENTS,
    StudyRecord,
    VideoRecord,
    territory_of,
    territory_segments,
)


def video(i, artery="LCA", equipment="none", contrast=True, t=None,
          primary=-30.0, secondary=30.0):
    return VideoRecord(
        video_id=f"V{i}",
        acquired_at=float(i if t is None else t),
        primary_angle_deg=primary,
        secondary_angle_deg=secondary,
        fps=15.0,
        frame_count=60,
        contrast=contrast,
        equipment=equipment,
        artery=artery,
    )


def study(videos, dominance="right", reports=True):
    return StudyRecord(
        study_id="S0",
        patient_id="P0",
        dominance=dominance,
        videos=videos,
        report_text={"LCA": "", "RCA": ""} if reports else {},
    )


class TestClassifyView:
    @pytest.mark.parametrize(
        "primary,secondary,expected",
        [
            (-30, 30, "RAO_Cranial"),
            (0, 0, "AP"),
            (95, 0, "LAO_Lateral"),
            (-60, 0, "Other"),
            (-95, 10, "RAO_Lateral"),
            (30, -30, "LAO_Caudal"),
            (0, 30, "AP_Cranial"),
            (0, -30, "AP_Caudal"),
            (-30, 0, "RAO_Straight"),
            (30, 0, "LAO_Straight"),
            (30, 30, "LAO_Cranial"),
            (-30, -30, "RAO_Caudal"),
            (180, 0, "Other"),
            (0, 60, "Other"),
        ],
    )
    def test_examples(self, primary, secondary, expected):
        assert classify_view(primary, secondary) == expected

    @pytest.mark.parametrize(
        "primary,secondary,expected",
        [
            # boundary ownership: center band closed, outer bands own their
            # outermost bound, inner bounds open toward the center
            (-15, 0, "AP"),
            (15, 0, "AP"),
            (-45, 0, "RAO_Straight"),
            (45, 0, "LAO_Straight"),
            (0, 15, "AP"),
            (0, -15, "AP"),
            (0, 45, "AP_Cranial"),
            (0, -45, "AP_Caudal"),
            (70, 0, "LAO_Lateral"),
            (110, 0, "LAO_Lateral"),
            (-70, 0, "RAO_Lateral"),
            (-110, 0, "RAO_Lateral"),
            (69, 0, "Other"),
            (46, 0, "Other"),
        ],
    )
    def test_boundaries(self, primary, secondary, expected):
        assert classify_view(primary, secondary) == expected

    def test_invalid_angle(self):
        with pytest.raises(ValidationError, match="invalid angle"):
            classify_view(float("nan"), 0.0)
        with pytest.raises(ValidationError, match="invalid angle"):
            classify_view(0.0, float("inf"))

    def test_sampling_boxes_classify_to_their_class(self):
        rng = np.random.default_rng(0)
        for name, (p_lo, p_hi, s_lo, s_hi) in VIEW_SAMPLING_BOXES.items():
            for _ in range(50):
                p = rng.uniform(p_lo, p_hi)
                s = rng.uniform(s_lo, s_hi)
                assert classify_view(p, s) == name


class TestAssignPhases:
    def test_quoted_rule_sequence(self):
        vids = [
            video(0, equipment="none"),
            video(1, equipment="wire"),
            video(2, equipment="none"),
        ]
        phases = [v.phase for v in assign_phases(vids)]
        assert phases == ["diagnostic", "interventional", "post_procedural"]

    def test_all_contrast_none_equipment(self):
        phases = [v.phase for v in assign_phases([video(i) for i in range(4)])]
        assert phases == ["diagnostic"] * 4

    def test_cross_artery_independence(self):
        vids = [
            video(0, artery="RCA", equipment="wire"),
            video(1, artery="LCA", equipment="none"),
            video(2, artery="RCA", equipment="none"),
        ]
        out = assign_phases(vids)
        assert out[0].phase == "interventional"
        assert out[1].phase == "diagnostic"  # LCA untouched by RCA wire
        assert out[2].phase == "post_procedural"

    def test_unsorted_rejected(self):
        vids = [video(0, t=5.0), video(1, t=1.0)]
        with pytest.raises(ValidationError, match="unsorted study"):
            assign_phases(vids)

    def test_view_class_filled_in(self):
        out = assign_phases([video(0, primary=0.0, secondary=0.0)])
        assert out[0].view_class == "AP"

    @given(
        st.lists(
            st.tuples(st.sampled_from(["LCA", "RCA"]), st.booleans(), st.booleans()),
            min_size=1,
            max_size=20,
        )
    )
    @settings(max_examples=200, deadline=None)
    def test_monotone_no_diagnostic_after_equipment(self, spec):
        vids = [
            video(i, artery=a, equipment="wire" if has_eq else "none", contrast=c)
            for i, (a, has_eq, c) in enumerate(spec)
        ]
        out = assign_phases(vids)
        seen = set()
        for v in out:
            if v.equipment != "none":
                seen.add(v.artery)
            elif v.artery in seen:
                assert v.phase != "diagnostic"


class TestSelectDiagnostic:
    def _staged(self, videos, dominance="right"):
        return study(assign_phases(videos), dominance=dominance)

    def test_padding_mask(self):
        s = self._staged([video(i, artery="LCA" if i % 2 else "RCA") for i in range(4)])
        kept, mask = select_diagnostic(s, max_n=10)
        assert len(kept) == 4
        assert mask.tolist() == [True] * 4 + [False] * 6

    def test_overflow_inference_takes_first_ten(self):
        s = self._staged([video(i) for i in range(13)])
        kept, mask = select_diagnostic(s, max_n=10, mode="inference")
        assert [v.video_id for v in kept] == [f"V{i}" for i in range(10)]
        assert mask.all()

    def test_overflow_training_seeded_sample(self):
        s = self._staged([video(i) for i in range(13)])
        kept_a, _ = select_diagnostic(s, max_n=10, mode="training", seed=4)
        kept_b, _ = select_diagnostic(s, max_n=10, mode="training", seed=4)
        assert [v.video_id for v in kept_a] == [v.video_id for v in kept_b]
        times = [v.acquired_at for v in kept_a]
        assert times == sorted(times)

    def test_only_diagnostic_retained(self):
        vids = [
            video(0, equipment="none"),
            video(1, equipment="wire"),
            video(2, equipment="none"),
            video(3, artery="RCA"),
        ]
        s = self._staged(vids)
        kept, _ = select_diagnostic(s)
        assert {v.video_id for v in kept} == {"V0", "V3"}
        assert all(v.phase == "diagnostic" for v in kept)

    def test_non_contrast_excluded(self):
        vids = [video(0, contrast=False), video(1, artery="RCA")]
        kept, _ = select_diagnostic(self._staged(vids))
        assert [v.video_id for v in kept] == ["V1"]

    def test_no_diagnostic_content(self):
        vids = [video(0, equipment="wire"), video(1, equipment="device")]
        with pytest.raises(ValidationError, match="no diagnostic content"):
            select_diagnostic(self._staged(vids))

    def test_phases_required(self):
        with pytest.raises(ValidationError, match="phases not assigned"):
            select_diagnostic(study([video(0)]))


class TestPairVideosReports:
    def test_right_dominant_pda_in_rca(self):
        s = study([video(0), video(1, artery="RCA")], dominance="right")
        lca, rca = pair_videos_reports(s)
        assert "pda" in rca.segments and "pda" not in lca.segments
        assert "posterolateral" in rca.segments

    def test_left_dominant_pda_in_lca(self):
        s = study([video(0), video(1, artery="RCA")], dominance="left")
        lca, rca = pair_videos_reports(s)
        assert "pda" in lca.segments and "pda" not in rca.segments
        assert rca.segments == ("prox_rca", "mid_rca", "dist_rca")

    def test_co_dominant_matches_right(self):
        right = pair_videos_reports(study([video(0), video(1, artery="RCA")], "right"))
        co = pair_videos_reports(study([video(0), video(1, artery="RCA")], "co"))
        assert right[0].segments == co[0].segments
        assert right[1].segments == co[1].segments

    def test_videos_routed_by_artery(self):
        s = study([video(0), video(1, artery="RCA"), video(2)], dominance="right")
        lca, rca = pair_videos_reports(s)
        assert {v.video_id for v in lca.videos} == {"V0", "V2"}
        assert {v.video_id for v in rca.videos} == {"V1"}

    def test_missing_report_rejected(self):
        s = study([video(0), video(1, artery="RCA")], reports=False)
        with pytest.raises(ValidationError, match="unpaired territory"):
            pair_videos_reports(s)

    @pytest.mark.parametrize("dominance", ["right", "left", "co"])
    def test_territory_partition(self, dominance):
        lca = set(territory_segments("LCA", dominance))
        rca = set(territory_segments("RCA", dominance))
        assert lca | rca == set(SEGMENTS)
        assert not (lca & rca)
        for seg in SEGMENTS:
            assert territory_of(seg, dominance) in ("LCA", "RCA")
