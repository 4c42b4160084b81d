"""Protocol codec, subject matching and MQTT mapping tests."""

import itertools
import random

import pytest
from hypothesis import given, strategies as st

from paveharvest import wire
from paveharvest.wire import (
    Frame,
    InvalidSubject,
    InvalidTopic,
    MalformedFrame,
    PayloadError,
    PayloadTooLarge,
    SamplePayload,
    Subject,
    decode_sample,
    encode_frame,
    mqtt_topic_to_subject,
    parse_frame,
    subject_matches,
    subject_to_mqtt_topic,
)

TOKEN_ST = st.from_regex(r"[A-Za-z0-9_-]+", fullmatch=True)


def concrete_subjects(max_tokens=6):
    return st.lists(TOKEN_ST, min_size=1, max_size=max_tokens).map(
        lambda toks: Subject(tuple(toks))
    )


def pattern_subjects(max_tokens=6):
    token = st.one_of(TOKEN_ST, st.just("*"))

    def build(toks, tail):
        return Subject(tuple(toks) + ((">",) if tail else ()))

    return st.builds(
        build,
        st.lists(token, min_size=1, max_size=max_tokens),
        st.booleans(),
    )


# --- frame grammar -----------------------------------------------------------


def test_parse_ping():
    assert parse_frame(b"PING\r\n") == (Frame(wire.PING), 6)


def test_parse_pub():
    payload = b'{"ts":1,"v":2.5,1}'
    assert len(payload) == 18
    raw = b"PUB site.65.daq.1.sensor.epc3 18\r\n" + payload + b"\r\n"
    frame, used = parse_frame(raw)
    assert used == len(raw)
    assert frame.kind == wire.PUB
    assert str(frame.subject) == "site.65.daq.1.sensor.epc3"
    assert frame.payload == payload


def test_parse_pub_rejects_wildcard_subject():
    with pytest.raises(MalformedFrame):
        parse_frame(b"PUB site.*.x 2\r\nhi\r\n")


def test_parse_incomplete_returns_none():
    raw = b"PUB a.b 5\r\nhel"
    assert parse_frame(raw) is None
    assert parse_frame(b"PU") is None
    assert parse_frame(b"") is None


def test_parse_unknown_verb():
    with pytest.raises(MalformedFrame):
        parse_frame(b"NOPE x\r\n")


def test_parse_bad_length():
    with pytest.raises(MalformedFrame):
        parse_frame(b"PUB a.b -3\r\n\r\n")
    with pytest.raises(MalformedFrame):
        parse_frame(b"PUB a.b xx\r\n\r\n")


def test_parse_oversize_payload():
    with pytest.raises(PayloadTooLarge):
        parse_frame(b"PUB a.b 2000000\r\n", max_payload=1 << 20)


def test_parse_payload_missing_terminator():
    with pytest.raises(MalformedFrame):
        parse_frame(b"PUB a.b 2\r\nhiXY")


def test_encode_pong():
    assert encode_frame(Frame(wire.PONG)) == b"PONG\r\n"


def test_encode_sub_pattern():
    f = Frame(wire.SUB, subject=Subject.parse("site.>"), sid=7)
    assert encode_frame(f) == b"SUB site.> 7\r\n"


def test_err_round_trip():
    raw = encode_frame(Frame(wire.ERR, message="slow consumer"))
    assert raw == b"-ERR slow consumer\r\n"
    frame, used = parse_frame(raw)
    assert used == len(raw)
    assert frame.message == "slow consumer"


def frames_strategy():
    concretes = concrete_subjects()
    payloads = st.binary(max_size=64)
    sids = st.integers(min_value=0, max_value=2**32)
    return st.one_of(
        st.just(Frame(wire.PING)),
        st.just(Frame(wire.PONG)),
        st.just(Frame(wire.OK)),
        st.builds(lambda m: Frame(wire.ERR, message=m),
                  st.text(alphabet=st.characters(min_codepoint=32, max_codepoint=126),
                          max_size=40)),
        st.builds(lambda s, p: Frame(wire.PUB, subject=s, payload=p), concretes, payloads),
        st.builds(lambda s, i: Frame(wire.SUB, subject=s, sid=i), pattern_subjects(), sids),
        st.builds(lambda i: Frame(wire.UNSUB, sid=i), sids),
        st.builds(lambda s, i, p: Frame(wire.MSG, subject=s, sid=i, payload=p),
                  concretes, sids, payloads),
    )


@given(frames_strategy())
def test_frame_round_trip(frame):
    raw = encode_frame(frame)
    parsed, used = parse_frame(raw)
    assert used == len(raw)
    assert parsed == frame
    assert encode_frame(parsed) == raw  # byte-exact


@given(frames_strategy(), st.binary(max_size=8))
def test_frame_parse_leaves_trailing_bytes(frame, extra):
    raw = encode_frame(frame)
    parsed, used = parse_frame(raw + extra)
    assert used == len(raw)
    assert parsed == frame


# --- subjects ----------------------------------------------------------------


def test_subject_validation():
    with pytest.raises(InvalidSubject):
        Subject(())
    with pytest.raises(InvalidSubject):
        Subject(("a", ""))
    with pytest.raises(InvalidSubject):
        Subject(("a", "b.c"))
    with pytest.raises(InvalidSubject):
        Subject((">", "a"))  # '>' must be last
    Subject(("a", "*", ">"))  # legal pattern


def test_subject_matches_examples():
    assert subject_matches(Subject.parse("site.65.>"),
                           Subject.parse("site.65.daq.1.sensor.epc3"))
    assert not subject_matches(Subject.parse("site.*.sensor"),
                               Subject.parse("site.65.daq"))


def reference_matches(pattern: tuple, subject: tuple) -> bool:
    """Token-by-token recursive matcher, kept independent of the library."""
    if not pattern:
        return not subject
    head, rest = pattern[0], pattern[1:]
    if head == ">":
        return len(subject) >= 1 and not rest
    if not subject:
        return False
    if head == "*" or head == subject[0]:
        return reference_matches(rest, subject[1:])
    return False


@given(concrete_subjects())
def test_matching_reflexive_and_full_wildcard(s):
    assert subject_matches(s, s)
    assert subject_matches(Subject((">",)), s)


@given(pattern_subjects(), concrete_subjects())
def test_matching_agrees_with_reference(pattern, subject):
    assert subject_matches(pattern, subject) == reference_matches(
        pattern.tokens, subject.tokens
    )


def test_matching_exhaustive_small_alphabet():
    """Exhaustive check over <=4-token subjects from a 3-symbol alphabet."""
    alphabet = ("a", "b", "c")
    subjects = [
        toks
        for n in range(1, 5)
        for toks in itertools.product(alphabet, repeat=n)
    ]
    patterns = []
    for n in range(1, 5):
        for toks in itertools.product(alphabet + ("*",), repeat=n):
            patterns.append(toks)
            if n < 5:
                patterns.append(toks[: n - 1] + (">",) if n > 1 else (">",))
    patterns = sorted(set(patterns))
    for ptoks in patterns:
        p = Subject(ptoks)
        star_positions = [i for i, t in enumerate(ptoks) if t == "*"]
        for stoks in subjects:
            got = subject_matches(p, Subject(stoks))
            assert got == reference_matches(ptoks, stoks)
            if got:
                # '*' consumed exactly one token each
                base = len(ptoks) - (1 if ptoks[-1] == ">" else 0)
                assert len(stoks) >= base
                for i in star_positions:
                    assert i < len(stoks)


# --- MQTT mapping ------------------------------------------------------------


def test_mqtt_topic_examples():
    assert str(mqtt_topic_to_subject("site/65/daq/1/sensor/epc3")) == \
        "site.65.daq.1.sensor.epc3"
    assert str(mqtt_topic_to_subject("site/+/sensor/#")) == "site.*.sensor.>"
    with pytest.raises(InvalidTopic):
        mqtt_topic_to_subject("a/b.c/d")


def test_mqtt_topic_rejects():
    for bad in ("", "a//b", "a/#/b", "a/*", "a/>x", "a/b+c"):
        with pytest.raises(InvalidTopic):
            mqtt_topic_to_subject(bad)


def test_mqtt_mapping_injective():
    rng = random.Random(7)
    words = ["site", "65", "daq", "1", "sensor", "epc3", "t_1", "x-y"]
    topics = set()
    while len(topics) < 500:
        n = rng.randint(1, 5)
        levels = [rng.choice(words + ["+"]) for _ in range(n)]
        if rng.random() < 0.3:
            levels.append("#")
        topics.add("/".join(levels))
    subjects = {}
    for topic in topics:
        subj = mqtt_topic_to_subject(topic)
        assert str(subj) not in subjects, "collision breaks injectivity"
        subjects[str(subj)] = topic
        assert subject_to_mqtt_topic(subj) == topic


# --- sample payloads ---------------------------------------------------------


def test_sample_payload_round_trip():
    p = SamplePayload(ts=1_700_000_000_000_000, v=12.5, seq=9, unit="kPa")
    assert decode_sample(p.encode()) == p


def test_sample_payload_strictness():
    ok = b'{"ts":1,"v":2.5,"seq":0,"unit":"kPa"}'
    decode_sample(ok)
    for bad in (
        b"{}",
        b"nope",
        b'{"ts":1,"v":2.5,"seq":0,"unit":"kPa","x":1}',
        b'{"ts":0,"v":2.5,"seq":0,"unit":"kPa"}',
        b'{"ts":-5,"v":2.5,"seq":0,"unit":"kPa"}',
        b'{"ts":1,"v":"2.5","seq":0,"unit":"kPa"}',
        b'{"ts":1,"v":2.5,"seq":-1,"unit":"kPa"}',
        b'{"ts":1,"v":2.5,"seq":0,"unit":7}',
        b'{"ts":true,"v":2.5,"seq":0,"unit":"kPa"}',
    ):
        with pytest.raises(PayloadError):
            decode_sample(bad)


def test_sample_payload_nonfinite_decodes():
    # non-finite v is structurally valid; the ingest layer classifies it
    p = decode_sample(b'{"ts":1,"v":NaN,"seq":0,"unit":"kPa"}')
    assert not wire.is_finite(p.v)
