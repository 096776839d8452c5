import configparser
import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from genids.can_ingest import (
    ATTACK_LABELS,
    CanFrame,
    ClassLabel,
    IngestError,
    InsufficientFrames,
    LogFormat,
    balanced_subset_indices,
    build_balanced_train_subset,
    parse_log,
    parse_ratio,
    read_log,
    split_train_test,
)
from genids.traffic_synth import write_log

ROW = "1478198376.389427,0316,8,05,21,68,09,21,21,00,6f,R"


def test_dataset_row_with_normal_flag():
    res = parse_log(ROW + "\n", file_label=ClassLabel.DOS)
    assert res.rejects == []
    (f,) = res.frames
    assert f.timestamp == 1478198376.389427
    assert f.can_id == 0x316 == 790
    assert f.dlc == 8
    assert list(f.payload) == [0x05, 0x21, 0x68, 0x09, 0x21, 0x21, 0x00, 0x6F]
    assert f.label == ClassLabel.NORMAL


def test_injected_flag_takes_file_attack_type():
    res = parse_log("1.0,0000,8,00,00,00,00,00,00,00,00,T\n", file_label=ClassLabel.DOS)
    assert res.frames[0].label == ClassLabel.DOS


def test_injected_flag_without_file_context_is_rejected():
    res = parse_log("1.0,0000,8,00,00,00,00,00,00,00,00,T\n", strict=False)
    assert res.frames == [] and len(res.rejects) == 1


def test_extended_id_rejected_with_reason():
    good = [f"{i * 0.01:.6f},0100,1,00,R" for i in range(200)]
    res = parse_log("\n".join(good + ["2.5,FFFF,1,00,R"]) + "\n")
    assert len(res.frames) == 200
    (rej,) = res.rejects
    assert rej.row == 201
    assert rej.reason == "id exceeds 11-bit range"


def test_short_frame_layout_flag_follows_payload():
    res = parse_log("0.5,05F0,2,80,00,R\n")
    f = res.frames[0]
    assert f.dlc == 2 and f.payload == bytes([0x80, 0x00]) and f.label == ClassLabel.NORMAL


def test_too_many_rejects_is_fatal():
    rows = [f"{i}.0,0100,1,00,R" for i in range(98)] + ["x,y,z"] * 2
    with pytest.raises(IngestError, match="rejected"):
        parse_log("\n".join(rows))
    # exactly 1% is tolerated
    rows = [f"{i}.0,0100,1,00,R" for i in range(99)] + ["x,y,z"]
    assert len(parse_log("\n".join(rows)).rejects) == 1


def test_wrong_column_map_trips_reject_threshold():
    fmt = LogFormat(id_col=2, dlc_col=1)
    with pytest.raises(IngestError):
        parse_log(ROW + "\n" + ROW + "\n", fmt, file_label=ClassLabel.DOS)


def test_unreadable_file_is_fatal(tmp_path):
    with pytest.raises(IngestError, match="cannot read"):
        read_log(tmp_path / "missing_dos.csv")


def test_read_log_takes_label_from_file_name(tmp_path):
    p = tmp_path / "Fuzzy_dataset.csv"
    p.write_text("0.1,0123,3,01,02,03,T\n0.2,0316,1,ff,R\n")
    labels = [f.label for f in read_log(p).frames]
    assert labels == [ClassLabel.FUZZY, ClassLabel.NORMAL]


def test_log_format_from_config():
    cp = configparser.ConfigParser()
    cp.read_string("[log_format]\nflag_col = 11\ndelimiter = ;\n[flags]\nr = Normal\nt = @file\n")
    fmt = LogFormat.from_config(cp)
    assert fmt.flag_col == 11 and fmt.delimiter == ";"
    assert fmt.flags == {"R": "Normal", "T": "@file"}
    row = ROW.replace(",", ";")
    assert parse_log(row, fmt, ClassLabel.DOS).frames[0].can_id == 790


def test_frame_invariants():
    with pytest.raises(ValueError, match="11-bit"):
        CanFrame(0.0, 0x800, 0, b"")
    with pytest.raises(ValueError):
        CanFrame(0.0, 1, 2, b"\x00")
    with pytest.raises(ValueError):
        CanFrame(-1.0, 1, 0, b"")


frames_st = st.lists(
    st.builds(
        CanFrame,
        timestamp=st.floats(0, 2e9, allow_nan=False).map(lambda t: round(t, 6)),
        can_id=st.integers(0, 0x7FF),
        dlc=st.just(0),
        payload=st.just(b""),
        label=st.sampled_from(list(ClassLabel)),
    ).flatmap(lambda f: st.binary(min_size=0, max_size=8).map(
        lambda p: CanFrame(f.timestamp, f.can_id, len(p), p, f.label))),
    max_size=40,
)


@given(frames_st)
@settings(max_examples=150, deadline=None)
def test_serialize_parse_round_trip(frames):
    buf = io.StringIO()
    write_log(frames, LogFormat(), buf)
    res = parse_log(buf.getvalue())
    assert res.rejects == []
    assert res.frames == frames


def test_split_exact_division():
    labels = np.zeros(4000, dtype=int)
    s = split_train_test(labels, "3:1", seed=0)
    assert (len(s.train_idx), len(s.test_idx)) == (3000, 1000)
    assert s.manifest["n_train"] == 3000 and s.manifest["n_test"] == 1000


def test_split_follows_ratio_not_reported_counts():
    # 16.5M at 3:1 -> 12,375,000 / 4,125,000
    n = 16_500_000
    r = parse_ratio("3:1")
    assert round(n * r / (1 + r)) == 12_375_000


def test_split_is_deterministic_and_seed_dependent():
    labels = np.arange(1000) % 5
    a = split_train_test(labels, "3:1", seed=4)
    b = split_train_test(labels, "3:1", seed=4)
    c = split_train_test(labels, "3:1", seed=5)
    assert np.array_equal(a.train_idx, b.train_idx)
    assert not np.array_equal(a.train_idx, c.train_idx)


def test_split_empty_input():
    with pytest.raises(ValueError):
        split_train_test([], "3:1")


@given(n=st.integers(1, 3000), num=st.integers(1, 9), den=st.integers(1, 9), seed=st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_split_is_partition_within_one_of_ratio(n, num, den, seed):
    labels = np.arange(n) % 5
    s = split_train_test(labels, (num, den), seed=seed)
    tr, te = s.train_idx, s.test_idx
    assert len(np.intersect1d(tr, te)) == 0
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(n))
    # |train| is the integer closest to n*r/(1+r)
    assert abs(len(tr) - n * num / (num + den)) <= 0.5 + 1e-9
    m = s.manifest
    assert sum(m["train"].values()) == len(tr) and sum(m["test"].values()) == len(te)
    assert m["train"]["Normal"] == int(np.sum(labels[tr] == 0))


def _labels_with(normal, attack_each):
    return np.array([0] * normal + [int(l) for l in ATTACK_LABELS for _ in range(attack_each)])


def test_balanced_subset_smallest_instance():
    labels = _labels_with(20, 5)
    idx = balanced_subset_indices(labels, per_attack=3, normal_ratio="2:1", seed=0)
    c = Counter(labels[idx].tolist())
    assert c == {0: 8, 1: 1, 2: 1, 3: 1, 4: 1}
    assert len(set(idx.tolist())) == len(idx)


@given(per_attack=st.integers(1, 60), num=st.integers(1, 5), den=st.integers(1, 5), seed=st.integers(0, 1000))
@settings(max_examples=80, deadline=None)
def test_balanced_subset_closed_form_counts(per_attack, num, den, seed):
    n_normal = round(per_attack * num / (num + den))
    n_attack = per_attack - n_normal
    labels = _labels_with(4 * n_normal + 7, n_attack + 3)
    idx = balanced_subset_indices(labels, per_attack=per_attack, normal_ratio=(num, den), seed=seed)
    c = Counter(labels[idx].tolist())
    assert len(idx) == 4 * per_attack
    assert c[0] == 4 * n_normal
    for lab in ATTACK_LABELS:
        assert c[int(lab)] == n_attack
    assert len(set(idx.tolist())) == len(idx)


def test_balanced_subset_respects_pool_and_seed():
    labels = _labels_with(200, 50)
    pool = np.arange(0, len(labels), 2)
    a = balanced_subset_indices(labels, pool, per_attack=15, seed=3)
    b = balanced_subset_indices(labels, pool, per_attack=15, seed=3)
    assert np.array_equal(a, b)
    assert set(a.tolist()) <= set(pool.tolist())


def test_balanced_subset_shortfall_names_label():
    labels = _labels_with(100, 5)
    labels = labels[labels != int(ClassLabel.GEAR_SPOOF)]
    labels = np.concatenate([labels, [int(ClassLabel.GEAR_SPOOF)] * 2])
    with pytest.raises(InsufficientFrames, match="Gear short by 3"):
        balanced_subset_indices(labels, per_attack=15)


def test_build_balanced_train_subset_from_frames():
    frames = [CanFrame(i * 0.001, 1, 0, b"", ClassLabel(0 if i < 400 else 1 + i % 4)) for i in range(600)]
    split = split_train_test(frames, "3:1", seed=1)
    sub = build_balanced_train_subset(split, per_attack=12, seed=2)
    c = Counter(int(f.label) for f in sub)
    assert c == {0: 32, 1: 4, 2: 4, 3: 4, 4: 4}
    train_ids = {id(split.frames[i]) for i in split.train_idx}
    assert all(id(f) in train_ids for f in sub)
