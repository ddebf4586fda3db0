"""Control-channel grammar and extended-block data-channel framing.

Everything here is a pure function over immutable values: command lines,
reply text, block frames, byte-range sets, and host-port encodings.  No
sockets, no files.  The server and client modules build their I/O on top.

Wire forms:

    command line    VERB [arg ...]\r\n           ASCII, <= 8 KiB
    reply           NNN text\r\n                 or NNN-... continuation
    data block      descriptor[1] count[8] offset[8] payload[count]
                    (big-endian, 17-byte header)
    range marker    "Range Marker a-b[,c-d]*"    half-open byte intervals
    host-port       "h1,h2,h3,h4,p1,p2"          port = p1*256 + p2
"""

import re
import struct
from dataclasses import dataclass

# Line discipline
CRLF = "\r\n"
MAX_LINE = 8192

# Block descriptor flags (one byte, OR-able)
EOD = 0x08     # end of data on this channel
EOF = 0x40     # end of file; offset field carries expected EOD count
CLOSE = 0x04   # sender is closing the channel, do not cache it
MARKER = 0x20  # in-band marker, ignored by sinks

ALL_FLAGS = EOD | EOF | CLOSE | MARKER

BLOCK_HEADER_LEN = 17
_BLOCK_HEADER = struct.Struct(">BQQ")

# Payload size bounds for data blocks
MIN_BLOCK_SIZE = 4 * 1024
MAX_BLOCK_SIZE = 4 * 1024 * 1024
DEFAULT_BLOCK_SIZE = 64 * 1024

# Verbs the server understands; parse_command accepts any grammatical verb
# and leaves rejection of unknown ones to the server (reply 500).
KNOWN_VERBS = frozenset({
    "USER", "AUTH", "ADAT", "PASV", "PORT", "SPAS", "SPOR",
    "RETR", "STOR", "ERET", "ESTO", "REST", "SBUF", "OPTS",
    "SIZE", "ABOR", "QUIT",
})

_VERB_RE = re.compile(r"^[A-Z]{3,4}$")
_MARKER_RE = re.compile(r"^Range Marker (\d+-\d+(?:,\d+-\d+)*)$")
_HOSTPORT_RE = re.compile(r"(\d{1,3}),(\d{1,3}),(\d{1,3}),(\d{1,3}),(\d{1,3}),(\d{1,3})")


class WireError(Exception):
    """Base for malformed wire input."""


class MalformedLine(WireError):
    pass


class MalformedReply(WireError):
    pass


class MalformedMarker(WireError):
    pass


class MalformedEndpoint(WireError):
    pass


class LengthMismatch(WireError):
    pass


class BadDescriptor(WireError):
    pass


class TruncatedBlock(WireError):
    pass


class OversizeBlock(WireError):
    pass


class EmptyInterval(WireError):
    pass


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Command:
    """One parsed control-channel command."""
    verb: str
    args: tuple = ()
    raw: str = ""

    @property
    def known(self):
        return self.verb in KNOWN_VERBS

    def arg_tail(self, start):
        """Remaining args from `start` joined by single spaces (path slot)."""
        return " ".join(self.args[start:])


def render_command(verb, *args) -> str:
    """Render a command line, CRLF-terminated."""
    parts = [verb.upper()]
    parts.extend(str(a) for a in args)
    return " ".join(parts) + CRLF


def parse_command(line: str) -> Command:
    """Parse one CRLF-terminated command line.

    The verb is uppercased; args are the space-separated tokens after it.
    Unknown verbs parse fine -- rejecting them is the server's job.
    Raises MalformedLine for empty input, missing CRLF, over-length lines,
    or embedded control characters.
    """
    if not isinstance(line, str) or not line:
        raise MalformedLine("empty command line")
    if len(line) > MAX_LINE:
        raise MalformedLine("line exceeds %d bytes" % MAX_LINE)
    if not line.endswith(CRLF):
        raise MalformedLine("missing CRLF terminator")
    body = line[:-2]
    if any(ord(c) < 0x20 or ord(c) == 0x7F for c in body):
        raise MalformedLine("control character in command")
    if not body.isascii():
        raise MalformedLine("non-ASCII byte in command")
    tokens = [t for t in body.split(" ") if t]
    if not tokens:
        raise MalformedLine("no verb token")
    verb = tokens[0].upper()
    if not _VERB_RE.match(verb):
        raise MalformedLine("bad verb %r" % tokens[0])
    return Command(verb=verb, args=tuple(tokens[1:]), raw=line)


# ---------------------------------------------------------------------------
# Replies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Reply:
    """A numbered control-channel reply; `lines` is never empty."""
    code: int
    lines: tuple

    def __post_init__(self):
        if not (100 <= self.code <= 699):
            raise MalformedReply("reply code %r out of range" % (self.code,))
        lines = tuple(self.lines)
        if not lines:
            raise MalformedReply("reply needs at least one line")
        for text in lines:
            if "\r" in text or "\n" in text:
                raise MalformedReply("CR/LF inside reply line")
        object.__setattr__(self, "lines", lines)

    @property
    def text(self):
        return self.lines[-1]

    @property
    def preliminary(self):
        return self.code < 200

    @property
    def ok(self):
        return 200 <= self.code < 400


def reply(code, *lines) -> Reply:
    return Reply(code, tuple(lines))


def render_reply(r: Reply) -> str:
    """Render a reply; multi-line replies use the dash continuation form."""
    out = []
    for text in r.lines[:-1]:
        out.append("%03d-%s%s" % (r.code, text, CRLF))
    out.append("%03d %s%s" % (r.code, r.lines[-1], CRLF))
    return "".join(out)


def parse_reply(text: str) -> Reply:
    """Inverse of render_reply for a single complete reply."""
    lines = text.split(CRLF)
    if lines and lines[-1] == "":
        lines = lines[:-1]
    if not lines:
        raise MalformedReply("empty reply")
    code = None
    parsed = []
    terminated = False
    for raw in lines:
        if len(raw) < 4 or not raw[:3].isdigit() or raw[3] not in "- ":
            raise MalformedReply("bad reply line %r" % raw)
        this_code = int(raw[:3])
        if code is None:
            code = this_code
        elif this_code != code:
            raise MalformedReply("mixed codes in one reply")
        parsed.append(raw[4:])
        if raw[3] == " ":
            terminated = True
    if not terminated:
        raise MalformedReply("reply missing final line")
    return Reply(code, tuple(parsed))


# ---------------------------------------------------------------------------
# Extended-block framing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockHeader:
    """17-byte extended-block header.

    For EOF blocks the offset field carries the number of EOD blocks the
    receiver must collect before the transfer is complete.
    """
    descriptor: int
    count: int
    offset: int

    def __post_init__(self):
        if not 0 <= self.descriptor <= 0xFF:
            raise BadDescriptor("descriptor out of byte range")
        if self.descriptor & ~ALL_FLAGS:
            raise BadDescriptor("unknown descriptor bits 0x%02x" % self.descriptor)
        if self.count < 0 or self.offset < 0:
            raise LengthMismatch("negative count/offset")
        if self.count >> 64 or self.offset >> 64:
            raise LengthMismatch("count/offset exceeds 64 bits")
        if self.descriptor & (EOD | MARKER) and self.count != 0:
            raise BadDescriptor("EOD/MARKER blocks carry no payload")

    @property
    def is_data(self):
        return self.descriptor & (EOD | EOF | MARKER) == 0

    @property
    def is_eod(self):
        return bool(self.descriptor & EOD)

    @property
    def is_eof(self):
        return bool(self.descriptor & EOF)

    @property
    def is_close(self):
        return bool(self.descriptor & CLOSE)

    @property
    def is_marker(self):
        return bool(self.descriptor & MARKER)


def encode_block(header: BlockHeader, payload: bytes) -> bytes:
    """Encode one block: 17-byte header followed by the payload."""
    if len(payload) != header.count:
        raise LengthMismatch(
            "payload is %d bytes, header says %d" % (len(payload), header.count))
    return _BLOCK_HEADER.pack(header.descriptor, header.count, header.offset) + payload


def decode_block(stream, max_count=MAX_BLOCK_SIZE):
    """Read one block from `stream` (an object with .read(n)).

    Returns (BlockHeader, payload), or None on a clean EOF at a block
    boundary.  Raises TruncatedBlock if the stream ends mid-header or
    mid-payload, OversizeBlock if count exceeds `max_count`.
    """
    head = _read_exact(stream, BLOCK_HEADER_LEN)
    if head is None:
        return None
    if len(head) < BLOCK_HEADER_LEN:
        raise TruncatedBlock("stream ended mid-header (%d bytes)" % len(head))
    descriptor, count, offset = _BLOCK_HEADER.unpack(head)
    if count > max_count:
        raise OversizeBlock("block count %d exceeds max %d" % (count, max_count))
    header = BlockHeader(descriptor, count, offset)
    if count == 0:
        return header, b""
    payload = _read_exact(stream, count)
    if payload is None or len(payload) < count:
        got = 0 if payload is None else len(payload)
        raise TruncatedBlock("stream ended mid-payload (%d/%d bytes)" % (got, count))
    return header, payload


def _read_exact(stream, n):
    """Read exactly n bytes; returns None on immediate EOF, short bytes on
    mid-read EOF."""
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if not buf:
                return None
            return bytes(buf)
        buf.extend(chunk)
    return bytes(buf)


# ---------------------------------------------------------------------------
# Range sets
# ---------------------------------------------------------------------------

class RangeSet:
    """An immutable set of disjoint, sorted, maximally-coalesced half-open
    byte intervals [start, end).

    Used for restart-marker bookkeeping: which bytes of a transfer have
    been received/durably written.  All operations return new sets.
    """

    __slots__ = ("_ivals",)

    def __init__(self, intervals=()):
        norm = []
        for start, end in sorted((int(s), int(e)) for s, e in intervals):
            if start >= end:
                raise EmptyInterval("empty interval [%d, %d)" % (start, end))
            if start < 0:
                raise EmptyInterval("negative interval start %d" % start)
            if norm and start <= norm[-1][1]:
                prev = norm[-1]
                norm[-1] = (prev[0], max(prev[1], end))
            else:
                norm.append((start, end))
        self._ivals = tuple(norm)

    @property
    def intervals(self):
        return self._ivals

    @property
    def total_bytes(self):
        return sum(e - s for s, e in self._ivals)

    def insert(self, start, end):
        """Return a new set including [start, end)."""
        if start >= end:
            raise EmptyInterval("empty interval [%d, %d)" % (start, end))
        return RangeSet(self._ivals + ((start, end),))

    def union(self, other):
        return RangeSet(self._ivals + other._ivals)

    def difference(self, other):
        """Return self minus other."""
        out = []
        cuts = other._ivals
        for start, end in self._ivals:
            pos = start
            for cs, ce in cuts:
                if ce <= pos or cs >= end:
                    continue
                if cs > pos:
                    out.append((pos, cs))
                pos = max(pos, ce)
                if pos >= end:
                    break
            if pos < end:
                out.append((pos, end))
        return RangeSet(out)

    def intersects(self, start, end):
        """True if [start, end) overlaps any interval."""
        for s, e in self._ivals:
            if s < end and start < e:
                return True
        return False

    def covers(self, start, end):
        """True if [start, end) lies entirely inside one interval."""
        if start >= end:
            return True
        for s, e in self._ivals:
            if s <= start and end <= e:
                return True
        return False

    def issubset(self, other):
        return all(other.covers(s, e) for s, e in self._ivals)

    def __bool__(self):
        return bool(self._ivals)

    def __iter__(self):
        return iter(self._ivals)

    def __len__(self):
        return len(self._ivals)

    def __eq__(self, other):
        return isinstance(other, RangeSet) and self._ivals == other._ivals

    def __hash__(self):
        return hash(self._ivals)

    def __repr__(self):
        return "RangeSet(%r)" % (list(self._ivals),)


def range_insert(rset: RangeSet, start, end) -> RangeSet:
    """Union of `rset` and [start, end); coalescing invariant holds."""
    return rset.insert(start, end)


def render_range_marker(rset: RangeSet) -> str:
    """Render a nonempty RangeSet as "Range Marker a-b[,c-d]*"."""
    if not rset:
        raise MalformedMarker("cannot render an empty range set")
    return "Range Marker " + ",".join("%d-%d" % (s, e) for s, e in rset)


def parse_range_marker(text: str) -> RangeSet:
    """Inverse of render_range_marker (after coalescing)."""
    m = _MARKER_RE.match(text.strip())
    if not m:
        raise MalformedMarker("bad range marker %r" % text)
    ivals = []
    for part in m.group(1).split(","):
        a, b = part.split("-")
        a, b = int(a), int(b)
        if a >= b:
            raise MalformedMarker("empty range %s in marker" % part)
        ivals.append((a, b))
    return RangeSet(ivals)


# ---------------------------------------------------------------------------
# Data endpoints and striped-passive replies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DataEndpoint:
    """Host/port pair for one data channel listener."""
    host: str
    port: int

    def __post_init__(self):
        if not 0 < self.port <= 0xFFFF:
            raise MalformedEndpoint("port %r out of range" % (self.port,))

    def __str__(self):
        return "%s:%d" % (self.host, self.port)


def render_hostport(ep: DataEndpoint) -> str:
    """Classic FTP host-port encoding "h1,h2,h3,h4,p1,p2" (IPv4 only)."""
    try:
        octets = [int(o) for o in ep.host.split(".")]
    except ValueError:
        octets = []
    if len(octets) != 4 or any(not 0 <= o <= 255 for o in octets):
        raise MalformedEndpoint("host %r is not dotted-quad IPv4" % ep.host)
    return "%d,%d,%d,%d,%d,%d" % (*octets, ep.port >> 8, ep.port & 0xFF)


def parse_hostport(text: str) -> DataEndpoint:
    """Parse the first host-port tuple found in `text`."""
    m = _HOSTPORT_RE.search(text)
    if not m:
        raise MalformedEndpoint("no host-port tuple in %r" % text)
    nums = [int(g) for g in m.groups()]
    if any(n > 255 for n in nums):
        raise MalformedEndpoint("octet out of range in %r" % text)
    host = "%d.%d.%d.%d" % tuple(nums[:4])
    port = nums[4] * 256 + nums[5]
    if port == 0:
        raise MalformedEndpoint("port 0 in %r" % text)
    return DataEndpoint(host, port)


SPAS_HEADER = "Entering Striped Passive Mode"
SPAS_FOOTER = "End"


def render_spas_reply(endpoints) -> Reply:
    """Build the 229 multi-line reply listing one endpoint per stripe."""
    endpoints = list(endpoints)
    if not endpoints:
        raise MalformedEndpoint("striped-passive reply needs at least one endpoint")
    lines = [SPAS_HEADER]
    lines.extend(" " + render_hostport(ep) for ep in endpoints)
    lines.append(SPAS_FOOTER)
    return Reply(229, tuple(lines))


def parse_spas_reply(text: str):
    """Extract the ordered endpoint list from a rendered 229 reply."""
    r = parse_reply(text)
    endpoints = []
    for line in r.lines:
        m = _HOSTPORT_RE.search(line)
        if m:
            endpoints.append(parse_hostport(line))
    if not endpoints:
        raise MalformedEndpoint("no endpoints in striped-passive reply")
    return endpoints
