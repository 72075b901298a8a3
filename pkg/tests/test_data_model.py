import datetime as dt
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaxsignal import data_model as dm
from vaxsignal.errors import DataError

from conftest import make_report


def canonical_stream(rows):
    head = "report_id,received_date,vaccine_group,gender,age_years,ae_list\n"
    return io.StringIO(head + "\n".join(rows) + "\n")


class TestParseCanonical:
    def test_basic_row(self):
        res = dm.parse_canonical(canonical_stream(
            ["R1,2021-05-02,Target,Female,34.5,Headache;Chills"]))
        assert len(res.reports) == 1 and not res.rejects
        r = res.reports[0]
        assert r.received_date == dt.date(2021, 5, 2)
        assert r.vaccine_group == dm.TARGET
        assert r.age_years == 34.5
        assert r.ae_ids == frozenset({"Headache", "Chills"})

    def test_repeated_term_collapses(self):
        res = dm.parse_canonical(canonical_stream(
            ["R1,2021-05-02,Control,Male,44,Rash; Rash ;Rash"]))
        assert res.reports[0].ae_ids == frozenset({"Rash"})

    def test_blank_gender_and_age(self):
        res = dm.parse_canonical(canonical_stream(
            ["R1,2021-05-02,Target,,,Rash"]))
        r = res.reports[0]
        assert r.gender == "Unknown" and r.age_years is None

    def test_bad_header_rejected_hard(self):
        with pytest.raises(DataError, match="header"):
            dm.parse_canonical(io.StringIO("id,date\nR1,2020-01-01\n"))

    def test_reject_reasons(self):
        res = dm.parse_canonical(canonical_stream([
            "R1,2021-05-02,Moderna,Female,34,Rash",
            "R2,not-a-date,Target,Female,34,Rash",
            "R3,2021-05-02,Target,F,34,Rash",
            "R4,2021-05-02,Target,Female,old,Rash",
            "R5,2021-05-02,Target,Female,34,;;",
        ]))
        assert not res.reports
        assert res.reject_counts() == {
            "unrecognized vaccine group": 1, "unparseable date": 1,
            "unrecognized gender": 1, "unparseable age": 1,
            "no symptoms": 1}

    def test_duplicates(self):
        res = dm.parse_canonical(canonical_stream([
            "R1,2021-05-02,Target,Female,34,Rash",
            "R1,2021-05-02,Target,Female,34,Rash",   # identical: dedupe
            "R2,2021-05-02,Target,Female,34,Rash",
            "R2,2021-05-02,Target,Female,35,Rash",   # conflicting
        ]))
        assert [r.report_id for r in res.reports] == ["R1", "R2"]
        assert res.rejects == [("R2", "conflicting duplicate report id")]


def raw_streams(data_rows, vax_rows, sym_rows,
                sym_head="VAERS_ID,SYMPTOM1,SYMPTOM2,SYMPTOM3,SYMPTOM4,"
                         "SYMPTOM5"):
    data = io.StringIO("VAERS_ID,RECVDATE,AGE_YRS,SEX\n"
                       + "\n".join(data_rows) + "\n")
    vax = io.StringIO("VAERS_ID,VAX_TYPE\n" + "\n".join(vax_rows) + "\n")
    sym = io.StringIO(sym_head + "\n" + "\n".join(sym_rows) + "\n")
    return data, vax, sym


class TestParseRaw:
    def test_join_and_symptom_union(self):
        # two symptom rows for one report: union of 7 distinct terms
        res = dm.parse_raw_reports(*raw_streams(
            ["900001,03/15/2021,52,F"],
            ["900001,COVID19"],
            ["900001,Pyrexia,Chills,Fatigue,Nausea,Headache",
             "900001,Myalgia,Arthralgia,Pyrexia,,"]),
            target_codes={"COVID19"}, control_codes={"FLU4"})
        assert not res.rejects
        r = res.reports[0]
        assert r.vaccine_group == dm.TARGET
        assert r.received_date == dt.date(2021, 3, 15)
        assert len(r.ae_ids) == 7

    def test_group_resolution(self):
        res = dm.parse_raw_reports(*raw_streams(
            ["1,01/05/2021,30,F", "2,01/05/2021,30,F", "3,01/05/2021,30,F",
             "4,01/05/2021,30,F", "5,01/05/2021,30,M"],
            ["1,COVID19", "1,FLU4",        # mixed -> reject
             "2,FLU4", "2,HPV9",           # control + other -> Control
             "3,HPV9",                     # other only -> reject
             "5,COVID19"],                 # 4 has no vax rows
            ["1,Rash,,,,", "2,Rash,,,,", "3,Rash,,,,", "4,Rash,,,,",
             "5,Rash,,,,"]),
            target_codes={"COVID19"}, control_codes={"FLU4"})
        groups = {r.report_id: r.vaccine_group for r in res.reports}
        assert groups == {"2": dm.CONTROL, "5": dm.TARGET}
        assert dict(res.rejects) == {
            "1": "mixed vaccine groups",
            "3": "no study-group vaccine codes",
            "4": "no vaccine records"}

    def test_missing_join_key_is_hard_error(self):
        with pytest.raises(DataError, match="row 3"):
            dm.parse_raw_reports(*raw_streams(
                ["1,01/05/2021,30,F", ",01/05/2021,31,F"],
                ["1,COVID19"], ["1,Rash,,,,"]),
                target_codes={"COVID19"}, control_codes={"FLU4"})

    def test_conflicting_demographics_rejected(self):
        res = dm.parse_raw_reports(*raw_streams(
            ["7,01/05/2021,30,F", "7,01/05/2021,31,F"],
            ["7,COVID19"], ["7,Rash,,,,"]),
            target_codes={"COVID19"}, control_codes={"FLU4"})
        assert not res.reports
        assert res.rejects == [("7", "conflicting duplicate demographics")]

    def test_empty_symptom_file_warns(self, caplog):
        data = io.StringIO("VAERS_ID,RECVDATE,AGE_YRS,SEX\n"
                           "1,01/05/2021,30,F\n")
        vax = io.StringIO("VAERS_ID,VAX_TYPE\n1,COVID19\n")
        sym = io.StringIO("")
        with caplog.at_level("WARNING"):
            res = dm.parse_raw_reports(data, vax, sym,
                                       target_codes={"COVID19"},
                                       control_codes={"FLU4"})
        assert not res.reports
        assert res.rejects == [("1", "no symptoms")]
        assert any("symptom file is empty" in m for m in caplog.messages)

    def test_sex_codes(self):
        res = dm.parse_raw_reports(*raw_streams(
            ["1,01/05/2021,30,F", "2,01/05/2021,30,M",
             "3,01/05/2021,30,U", "4,01/05/2021,30,"],
            ["1,COVID19", "2,COVID19", "3,COVID19", "4,COVID19"],
            ["1,Rash,,,,", "2,Rash,,,,", "3,Rash,,,,", "4,Rash,,,,"]),
            target_codes={"COVID19"}, control_codes={"FLU4"})
        genders = {r.report_id: r.gender for r in res.reports}
        assert genders == {"1": "Female", "2": "Male", "3": "Unknown",
                           "4": "Unknown"}


class TestAgeGroups:
    def test_boundaries(self):
        assert dm.assign_age_group(18.0) == "A18_30"
        assert dm.assign_age_group(29.99) == "A18_30"
        assert dm.assign_age_group(30.0) == "A30_65"
        assert dm.assign_age_group(64.999) == "A30_65"
        assert dm.assign_age_group(65.0) == "A65plus"
        assert dm.assign_age_group(101.0) == "A65plus"

    def test_under_adult_threshold_raises(self):
        with pytest.raises(ValueError):
            dm.assign_age_group(17.9)


class TestExclusions:
    def test_reasons_and_order(self):
        pol = dm.FilterPolicy()
        reports = [
            make_report("A", age=None),
            make_report("B", age=17.5),
            make_report("C", date=dt.date(2016, 8, 31)),
            make_report("D", date=dt.date(2023, 1, 1)),
            make_report("E", date=dt.date(2020, 2, 1), group=dm.TARGET),
            make_report("F", date=dt.date(2020, 2, 1), group=dm.CONTROL),
            make_report("G", date=dt.date(2020, 3, 16), group=dm.TARGET),
        ]
        kept, audit = dm.apply_exclusions(reports, pol)
        assert [r.report_id for r in kept] == ["F", "G"]
        assert audit == {"missing age": 1, "under minimum age": 1,
                         "outside study window": 2,
                         "target before earliest date": 1}

    def test_window_boundaries_inclusive(self):
        pol = dm.FilterPolicy()
        kept, _ = dm.apply_exclusions(
            [make_report("A", date=dt.date(2016, 9, 1), group=dm.CONTROL),
             make_report("B", date=dt.date(2022, 12, 31), group=dm.CONTROL)],
            pol)
        assert len(kept) == 2

    @given(st.lists(st.tuples(
        st.one_of(st.none(), st.floats(0, 100, allow_nan=False)),
        st.dates(dt.date(2015, 1, 1), dt.date(2024, 1, 1)),
        st.sampled_from([dm.TARGET, dm.CONTROL]))))
    @settings(max_examples=50, deadline=None)
    def test_partition_property(self, rows):
        reports = [make_report(f"R{i}", date=d, group=g, age=a)
                   for i, (a, d, g) in enumerate(rows)]
        kept, audit = dm.apply_exclusions(reports, dm.FilterPolicy())
        assert len(kept) + sum(audit.values()) == len(reports)


class TestFilterAes:
    def _reports(self, spec):
        # spec: list of (group, ae names)
        return [make_report(f"R{i}", group=g, aes=aes)
                for i, (g, aes) in enumerate(spec)]

    def test_boundary_retention(self):
        # Keep: exactly 1 target + 4 control = 5 total
        rows = [(dm.TARGET, ["Keep"])] + [(dm.CONTROL, ["Keep"])] * 4
        # DropControl: 2 target + 3 control = 5 total but control < 4
        rows += [(dm.TARGET, ["DropControl"])] * 2 \
            + [(dm.CONTROL, ["DropControl"])] * 3
        # DropTotal: 1 target + 3 control = 4 total
        rows += [(dm.TARGET, ["DropTotal"])] \
            + [(dm.CONTROL, ["DropTotal"])] * 3
        # DropTarget: 5 control, no target
        rows += [(dm.CONTROL, ["DropTarget"])] * 5
        assert dm.filter_aes(self._reports(rows),
                             dm.FilterPolicy()) == ["Keep"]

    def test_sorted_output(self):
        rows = [(dm.TARGET, ["b", "a"]), (dm.CONTROL, ["b", "a"]),
                (dm.CONTROL, ["b", "a"]), (dm.CONTROL, ["b", "a"]),
                (dm.CONTROL, ["b", "a"])]
        assert dm.filter_aes(self._reports(rows),
                             dm.FilterPolicy()) == ["a", "b"]

    def test_nothing_survives(self):
        with pytest.raises(DataError, match="survive"):
            dm.filter_aes(self._reports([(dm.TARGET, ["x"])]),
                          dm.FilterPolicy())


class TestAggregate:
    def test_hand_tally(self):
        reports = [
            make_report("1", gender="Female", age=40, group=dm.TARGET,
                        aes=("Rash", "Chills")),
            make_report("2", gender="Female", age=35, group=dm.TARGET,
                        aes=("Rash",)),
            make_report("3", gender="Male", age=70, group=dm.CONTROL,
                        aes=("Chills",)),
        ]
        t = dm.aggregate(reports, ["Chills", "Rash"])
        assert [s.label for s in t.strata] == \
            ["Female/A30_65/Target", "Male/A65plus/Control"]
        assert t.exposures.tolist() == [2, 1]
        # rows: Chills, Rash; cols: the two strata above
        assert t.counts.tolist() == [[1, 1], [2, 0]]

    def test_design_vectors(self):
        reports = [make_report("1", gender="Unknown", age=20,
                               group=dm.CONTROL, aes=("Rash",)),
                   make_report("2", gender="Male", age=66,
                               group=dm.TARGET, aes=("Rash",))]
        t = dm.aggregate(reports, ["Rash"])
        x = t.design_matrix
        assert x.shape == (2, 5)
        # Male/A65plus/Target row
        male = [s.gender for s in t.strata].index("Male")
        assert x[male].tolist() == [1.0, 1.0, 0.0, 0.0, 1.0]
        unknown = [s.gender for s in t.strata].index("Unknown")
        assert x[unknown].tolist() == [1.0, 0.0, 1.0, 0.0, 0.0]
        assert t.vaccine_indicator.tolist() == \
            [float(s.vaccine_group == dm.TARGET) for s in t.strata]

    def test_reference_levels_absorbed(self):
        reports = [make_report("1", gender="Female", age=25,
                               group=dm.CONTROL, aes=("Rash",))]
        t = dm.aggregate(reports, ["Rash"])
        assert t.design_matrix.tolist() == [[1.0, 0.0, 0.0, 0.0, 0.0]]

    def test_unmodeled_aes_ignored(self):
        reports = [make_report("1", aes=("Rash", "NotModeled"))]
        t = dm.aggregate(reports, ["Rash"])
        assert t.counts.tolist() == [[1]]

    def test_missing_age_raises(self):
        with pytest.raises(DataError, match="age"):
            dm.aggregate([make_report("1", age=None)], ["Headache"])

    @given(st.permutations(list(range(8))))
    @settings(max_examples=25, deadline=None)
    def test_order_invariance(self, perm):
        base = [make_report(f"R{i}",
                            gender=["Female", "Male"][i % 2],
                            age=[25, 45, 70][i % 3],
                            group=[dm.TARGET, dm.CONTROL][i % 2],
                            aes=(f"AE{i % 3}", "AE0"))
                for i in range(8)]
        t1 = dm.aggregate(base, ["AE0", "AE1", "AE2"])
        t2 = dm.aggregate([base[i] for i in perm], ["AE0", "AE1", "AE2"])
        assert t1 == t2

    def test_conservation(self):
        reports = [make_report(f"R{i}", age=30 + i) for i in range(5)]
        t = dm.aggregate(reports, ["Headache"])
        assert int(t.exposures.sum()) == 5


class TestSocAndNc:
    def test_load_soc_map(self):
        soc = dm.load_soc_map(io.StringIO(
            "ae_name,soc_name\nRash,Skin\nRash,Immune\nRash,Skin\n"
            "Chills,General\n"))
        assert soc["Rash"] == {"Skin", "Immune"}
        assert soc["Chills"] == {"General"}

    def test_malformed_row_names_line(self):
        with pytest.raises(DataError, match="line 3"):
            dm.load_soc_map(io.StringIO("ae_name,soc_name\nRash,Skin\nRash\n"))

    def test_header_required(self):
        with pytest.raises(DataError, match="header"):
            dm.load_soc_map(io.StringIO("a,b\nRash,Skin\n"))

    def test_nc_list(self):
        assert dm.load_nc_list(io.StringIO("A\n\n B \n")) == ["A", "B"]

    def test_build_dictionary_warns_on_gaps(self, caplog):
        soc = {"Rash": frozenset({"Skin"})}
        with caplog.at_level("WARNING"):
            d = dm.build_ae_dictionary(["Chills", "Rash"], soc,
                                       ["Rash", "Ghost"])
        assert d.memberships["Chills"] == frozenset()
        assert d.nc_ids == {"Rash"}
        assert d.soc_names == ["Skin"]
        assert d.soc_members("Skin") == ["Rash"]
        joined = " ".join(caplog.messages)
        assert "no SOC mapping" in joined and "Ghost" in joined

    def test_dictionary_roundtrip(self, tmp_path):
        d = dm.build_ae_dictionary(
            ["A", "B"], {"A": frozenset({"S1", "S2"})}, ["B"])
        p = dm.save_dictionary(d, tmp_path / "dict.csv")
        d2 = dm.load_dictionary(p)
        assert d2.ae_index == d.ae_index
        assert d2.memberships == d.memberships
        assert d2.nc_ids == d.nc_ids


class TestTableIO:
    def test_roundtrip(self, tmp_path):
        reports = [make_report(f"R{i}",
                               gender=["Female", "Male", "Unknown"][i % 3],
                               age=[25, 45, 70][i % 3],
                               group=[dm.TARGET, dm.CONTROL][i % 2],
                               aes=("AE_a", f"AE_{i % 2}"))
                   for i in range(10)]
        t = dm.aggregate(reports, sorted({"AE_a", "AE_0", "AE_1"}))
        dm.save_table(t, tmp_path)
        t2 = dm.load_table(tmp_path)
        assert t2 == t

    def test_counts_bounds_checked(self):
        with pytest.raises(DataError, match="0 <= y <= n"):
            dm.StratumTable([dm.Stratum(None, None, dm.TARGET, 3)],
                            ["A"], np.array([[4]]))

    def test_log_binom_coeff(self, tiny_table):
        from scipy.special import comb
        want = np.log(comb(tiny_table.exposures[None, :].astype(float),
                           tiny_table.counts.astype(float)))
        assert np.allclose(tiny_table.log_binom_coeff, want, atol=1e-10)
