"""Grammar, framing, and range-set tests for the wire module.

Derived expectations come from independent oracles: a per-byte bitmap
stands in for interval arithmetic, and encode/parse round trips are
checked against fuzzed inputs from a seeded RNG.
"""

import io
import random

import pytest

from gftp import wire
from gftp.wire import (
    BlockHeader,
    Command,
    DataEndpoint,
    RangeSet,
    Reply,
    decode_block,
    encode_block,
    parse_command,
    parse_hostport,
    parse_range_marker,
    parse_reply,
    parse_spas_reply,
    range_insert,
    render_command,
    render_hostport,
    render_range_marker,
    render_reply,
    render_spas_reply,
)


def bitmap(rset, universe):
    """Oracle: expand a RangeSet to a set of covered byte positions."""
    out = set()
    for s, e in rset:
        out.update(range(s, min(e, universe)))
    return out


class TestParseCommand:
    def test_retr(self):
        cmd = parse_command("RETR /d/f1\r\n")
        assert cmd.verb == "RETR"
        assert cmd.args == ("/d/f1",)

    def test_eret(self):
        cmd = parse_command("ERET P 1048576 4096 /d/f1\r\n")
        assert cmd.verb == "ERET"
        assert cmd.args == ("P", "1048576", "4096", "/d/f1")

    def test_empty_line_rejected(self):
        with pytest.raises(wire.MalformedLine):
            parse_command("")

    def test_bare_crlf_rejected(self):
        with pytest.raises(wire.MalformedLine):
            parse_command("\r\n")

    def test_missing_crlf_rejected(self):
        with pytest.raises(wire.MalformedLine):
            parse_command("QUIT")

    def test_lowercase_verb_uppercased(self):
        assert parse_command("quit\r\n").verb == "QUIT"

    def test_unknown_verb_parses(self):
        cmd = parse_command("XYZQ a b\r\n")
        assert cmd.verb == "XYZQ"
        assert not cmd.known

    def test_five_letter_verb_rejected(self):
        with pytest.raises(wire.MalformedLine):
            parse_command("HELLO\r\n")

    def test_control_char_rejected(self):
        with pytest.raises(wire.MalformedLine):
            parse_command("RETR a\x01b\r\n")

    def test_overlength_rejected(self):
        with pytest.raises(wire.MalformedLine):
            parse_command("RETR " + "a" * wire.MAX_LINE + "\r\n")

    def test_round_trip_fuzz(self):
        rng = random.Random(0x5EED)
        alphabet = "abcdefghijklmnopqrstuvwxyz0123456789/._-=;:"
        verbs = sorted(wire.KNOWN_VERBS)
        for _ in range(2000):
            verb = rng.choice(verbs)
            args = tuple(
                "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12)))
                for _ in range(rng.randint(0, 4))
            )
            line = render_command(verb, *args)
            cmd = parse_command(line)
            assert cmd.verb == verb
            assert cmd.args == args
            assert render_command(cmd.verb, *cmd.args) == line


class TestReply:
    def test_single_line(self):
        assert render_reply(Reply(230, ("User authenticated",))) == \
            "230 User authenticated\r\n"

    def test_marker_reply(self):
        assert render_reply(Reply(111, ("Range Marker 0-1048576",))) == \
            "111 Range Marker 0-1048576\r\n"

    def test_two_line_dash_form(self):
        text = render_reply(Reply(229, ("Entering Extended Passive Mode", "...")))
        assert text == "229-Entering Extended Passive Mode\r\n229 ...\r\n"

    def test_code_bounds(self):
        with pytest.raises(wire.MalformedReply):
            Reply(99, ("x",))
        with pytest.raises(wire.MalformedReply):
            Reply(700, ("x",))

    def test_no_lines_rejected(self):
        with pytest.raises(wire.MalformedReply):
            Reply(200, ())

    def test_parse_render_identity_fuzz(self):
        rng = random.Random(0xBEEF)
        for _ in range(2000):
            code = rng.randint(100, 699)
            lines = tuple(
                "".join(rng.choice("abc XYZ0129.-") for _ in range(rng.randint(0, 30)))
                for _ in range(rng.randint(1, 4))
            )
            r = Reply(code, lines)
            assert parse_reply(render_reply(r)) == r

    def test_parse_rejects_unterminated(self):
        with pytest.raises(wire.MalformedReply):
            parse_reply("229-only a continuation\r\n")


class TestBlockFraming:
    def test_plain_block_layout(self):
        h = BlockHeader(0x00, 5, 0)
        data = encode_block(h, b"hello")
        assert len(data) == 22
        assert data[0] == 0x00
        assert data[1:9] == (5).to_bytes(8, "big")
        assert data[9:17] == (0).to_bytes(8, "big")
        assert data[17:] == b"hello"

    def test_eod_block_layout(self):
        data = encode_block(BlockHeader(wire.EOD, 0, 0), b"")
        assert len(data) == 17
        assert data[0] == 0x08

    def test_length_mismatch(self):
        with pytest.raises(wire.LengthMismatch):
            encode_block(BlockHeader(0, 4, 0), b"hello")

    def test_decode_inverse(self):
        h = BlockHeader(0x00, 5, 0)
        got_h, got_p = decode_block(io.BytesIO(encode_block(h, b"hello")))
        assert got_h == h
        assert got_p == b"hello"

    def test_truncated_header(self):
        with pytest.raises(wire.TruncatedBlock):
            decode_block(io.BytesIO(b"\x00" * 16))

    def test_truncated_payload(self):
        data = encode_block(BlockHeader(0, 5, 0), b"hello")
        with pytest.raises(wire.TruncatedBlock):
            decode_block(io.BytesIO(data[:-1]))

    def test_clean_eof_returns_none(self):
        assert decode_block(io.BytesIO(b"")) is None

    def test_oversize_rejected(self):
        data = encode_block(BlockHeader(0, 64, 0), b"x" * 64)
        with pytest.raises(wire.OversizeBlock):
            decode_block(io.BytesIO(data), max_count=63)

    def test_eod_payload_rejected(self):
        with pytest.raises(wire.BadDescriptor):
            BlockHeader(wire.EOD, 3, 0)

    def test_round_trip_fuzz(self):
        rng = random.Random(0xF00D)
        flags = [0, wire.EOD, wire.EOF, wire.CLOSE, wire.MARKER,
                 wire.EOD | wire.CLOSE, wire.EOF | wire.CLOSE]
        for _ in range(10_000):
            descriptor = rng.choice(flags)
            if descriptor & (wire.EOD | wire.MARKER):
                count = 0
            else:
                count = rng.randint(0, 4096)
            offset = rng.randint(0, 2**40)
            payload = rng.randbytes(count)
            h = BlockHeader(descriptor, count, offset)
            got = decode_block(io.BytesIO(encode_block(h, payload)))
            assert got == (h, payload)

    def test_back_to_back_blocks(self):
        stream = io.BytesIO(
            encode_block(BlockHeader(0, 3, 0), b"abc")
            + encode_block(BlockHeader(0, 2, 3), b"de")
        )
        assert decode_block(stream)[1] == b"abc"
        assert decode_block(stream)[1] == b"de"
        assert decode_block(stream) is None


class TestRangeSet:
    def test_adjacent_coalesce(self):
        assert range_insert(RangeSet([(0, 100)]), 100, 200) == RangeSet([(0, 200)])

    def test_insert_into_empty(self):
        assert range_insert(RangeSet(), 5, 9) == RangeSet([(5, 9)])

    def test_empty_interval_rejected(self):
        with pytest.raises(wire.EmptyInterval):
            range_insert(RangeSet(), 9, 9)
        with pytest.raises(wire.EmptyInterval):
            range_insert(RangeSet(), 10, 9)

    def test_total_bytes(self):
        assert RangeSet([(0, 10), (20, 25)]).total_bytes == 15

    def test_insert_vs_bitmap_oracle(self):
        rng = random.Random(0xABCD)
        universe = 512
        for _ in range(50):
            rset = RangeSet()
            model = set()
            for _ in range(1000 // 50):
                a = rng.randint(0, universe - 2)
                b = rng.randint(a + 1, universe)
                rset = range_insert(rset, a, b)
                model.update(range(a, b))
                assert bitmap(rset, universe) == model
                # structural invariants: sorted, disjoint, coalesced
                ivals = rset.intervals
                for (s1, e1), (s2, e2) in zip(ivals, ivals[1:]):
                    assert s1 < e1 < s2 < e2

    def test_difference_vs_bitmap_oracle(self):
        rng = random.Random(0x1234)
        universe = 256
        for _ in range(500):
            a = RangeSet([_rand_ival(rng, universe) for _ in range(rng.randint(0, 4))])
            b = RangeSet([_rand_ival(rng, universe) for _ in range(rng.randint(0, 4))])
            diff = a.difference(b)
            assert bitmap(diff, universe) == bitmap(a, universe) - bitmap(b, universe)

    def test_covers_and_intersects(self):
        rs = RangeSet([(10, 20), (30, 40)])
        assert rs.covers(12, 18)
        assert not rs.covers(18, 32)
        assert rs.intersects(19, 31)
        assert not rs.intersects(20, 30)


def _rand_ival(rng, universe):
    a = rng.randint(0, universe - 2)
    return (a, rng.randint(a + 1, universe))


class TestRangeMarkers:
    def test_parse_two_ranges(self):
        assert parse_range_marker("Range Marker 0-1048576,2097152-3145728") == \
            RangeSet([(0, 1048576), (2097152, 3145728)])

    def test_render_single(self):
        assert render_range_marker(RangeSet([(0, 200)])) == "Range Marker 0-200"

    def test_bad_markers(self):
        for text in ("Range Marker", "Range Marker 5-5", "Range Marker 9-3",
                     "Marker 0-5", "Range Marker a-b"):
            with pytest.raises(wire.MalformedMarker):
                parse_range_marker(text)

    def test_empty_set_unrenderable(self):
        with pytest.raises(wire.MalformedMarker):
            render_range_marker(RangeSet())

    def test_round_trip_fuzz(self):
        rng = random.Random(0xC0DE)
        for _ in range(2000):
            rset = RangeSet([_rand_ival(rng, 1 << 30)
                             for _ in range(rng.randint(1, 6))])
            assert parse_range_marker(render_range_marker(rset)) == rset


class TestHostPort:
    def test_port_arithmetic(self):
        ep = parse_hostport("127,0,0,1,195,80")
        assert ep == DataEndpoint("127.0.0.1", 50000)

    def test_render(self):
        assert render_hostport(DataEndpoint("127.0.0.1", 50000)) == "127,0,0,1,195,80"

    def test_embedded_in_pasv_text(self):
        ep = parse_hostport("Entering Passive Mode (10,0,0,2,4,1)")
        assert ep == DataEndpoint("10.0.0.2", 1025)

    def test_rejects_garbage(self):
        with pytest.raises(wire.MalformedEndpoint):
            parse_hostport("no tuple here")
        with pytest.raises(wire.MalformedEndpoint):
            render_hostport(DataEndpoint("example.com", 21))


class TestSpasReply:
    def test_single_endpoint(self):
        r = render_spas_reply([DataEndpoint("127.0.0.1", 50000)])
        assert r.code == 229
        assert parse_spas_reply(render_reply(r)) == [DataEndpoint("127.0.0.1", 50000)]

    def test_empty_list_rejected(self):
        with pytest.raises(wire.MalformedEndpoint):
            render_spas_reply([])

    def test_round_trip_fuzz(self):
        rng = random.Random(0xACE)
        for _ in range(1000):
            eps = [
                DataEndpoint(
                    "%d.%d.%d.%d" % tuple(rng.randint(0, 255) for _ in range(4)),
                    rng.randint(1, 65535),
                )
                for _ in range(rng.randint(1, 4))
            ]
            text = render_reply(render_spas_reply(eps))
            assert parse_spas_reply(text) == eps
