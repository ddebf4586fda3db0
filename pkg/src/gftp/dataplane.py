"""Transfer mechanics shared by client and server.

Block planning, stripe assignment, parallel send/receive over extended-block
data channels, restart bookkeeping, and the data-channel cache.  The control
protocol lives in `server`/`client`; this module only moves bytes.

A "channel" is a connected TCP socket wrapped in BlockChannel.  Senders pull
blocks from a shared work-stealing queue so a slow channel never stalls the
transfer; receivers write payloads at their absolute offsets, so blocks may
arrive in any order on any channel.
"""

import hashlib
import hmac
import json
import os
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from . import wire
from .wire import (
    CLOSE,
    DEFAULT_BLOCK_SIZE,
    EOD,
    EOF,
    MAX_BLOCK_SIZE,
    MIN_BLOCK_SIZE,
    BlockHeader,
    RangeSet,
)

DEFAULT_PARALLELISM = 4
DEFAULT_CHANNEL_TTL = 30.0
DATA_TIMEOUT = 30.0

# Restart persistence cadence: durable progress is flushed at least this often
PERSIST_BYTES = 8 * 1024 * 1024
PERSIST_SECS = 2.0

RESTART_SUFFIX = ".gftp-restart"

# Data-channel authentication preamble: 16-byte nonce + 16-byte truncated
# HMAC-SHA-256 of the nonce under the shared transfer token.
PREAMBLE_LEN = 32
_PREAMBLE_NONCE = 16


class DataplaneError(Exception):
    """Base for transfer-mechanics failures."""


class ChannelFailure(DataplaneError):
    pass


class AllChannelsFailed(DataplaneError):
    def __init__(self, unsent):
        self.unsent = list(unsent)
        super().__init__("all data channels failed with %d blocks unsent" % len(self.unsent))


class OutOfRangeBlock(DataplaneError):
    pass


class DataConflict(DataplaneError):
    pass


class MarkerOutsideTarget(DataplaneError):
    pass


class DcauMismatch(DataplaneError):
    pass


# ---------------------------------------------------------------------------
# Specs and progress
# ---------------------------------------------------------------------------

GET = "GET"
PUT = "PUT"
THIRD_PARTY = "THIRD_PARTY"


@dataclass
class TransferSpec:
    """Everything a transfer needs to run."""
    direction: str = GET
    parallelism: int = DEFAULT_PARALLELISM
    stripes: tuple = ()               # DataEndpoints; empty = unstriped
    partial: tuple = None             # (offset, length) or None
    block_size: int = DEFAULT_BLOCK_SIZE
    buffer_size: int = None           # socket buffer bytes, None = OS default
    dcau_token: bytes = None          # shared secret for channel preambles
    verify: bool = False              # checksum-compare after transfer

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not MIN_BLOCK_SIZE <= self.block_size <= MAX_BLOCK_SIZE:
            raise ValueError("block_size %d outside [%d, %d]"
                             % (self.block_size, MIN_BLOCK_SIZE, MAX_BLOCK_SIZE))
        if self.partial is not None:
            off, length = self.partial
            if off < 0 or length < 0:
                raise ValueError("partial offset/length must be non-negative")
            self.partial = (int(off), int(length))
        self.stripes = tuple(self.stripes)


def spec_digest(url: str, spec: TransferSpec) -> str:
    """Fingerprint of the fields a restart must agree on."""
    blob = "|".join([
        url, spec.direction,
        repr(spec.partial), str(spec.block_size),
    ]).encode()
    return hashlib.sha256(blob).hexdigest()


class TransferProgress:
    """Live, thread-safe state of one transfer.

    `target` is the half-open byte range being moved, or None for stores
    whose extent the receiver does not know in advance (the protocol carries
    no size declaration; completion then rests on EOD accounting alone).
    """

    def __init__(self, target=None, clock=time.monotonic):
        self.target = tuple(target) if target is not None else None
        self.received = RangeSet()
        self.eod_seen = 0
        self.eod_expected = None
        self.throughput_samples = []
        self._clock = clock
        self._t0 = clock()
        self._last_sample = self._t0
        self._lock = threading.Lock()

    def note_payload(self, offset, count):
        with self._lock:
            if count:
                self.received = self.received.insert(offset, offset + count)
            now = self._clock()
            if now - self._last_sample >= 1.0:
                self._last_sample = now
                self.throughput_samples.append((now - self._t0, self.received.total_bytes))

    def note_eod(self):
        with self._lock:
            self.eod_seen += 1

    def set_eod_expected(self, n):
        with self._lock:
            self.eod_expected = n

    def snapshot(self):
        with self._lock:
            return self.received, self.eod_seen, self.eod_expected

    @property
    def complete(self):
        received, eod_seen, eod_expected = self.snapshot()
        if eod_expected is None or eod_seen < eod_expected:
            return False
        if self.target is None:
            return True
        start, end = self.target
        want = RangeSet([(start, end)]) if start < end else RangeSet()
        return received == want


# ---------------------------------------------------------------------------
# Block planning and striping
# ---------------------------------------------------------------------------

def plan_blocks(target, block_size):
    """Split [start, end) into contiguous blocks; the last may be short."""
    start, end = target
    if start > end:
        raise ValueError("inverted range [%d, %d)" % (start, end))
    blocks = []
    pos = start
    while pos < end:
        blocks.append((pos, min(pos + block_size, end)))
        pos += block_size
    return blocks


def assign_stripe(block_index, stripe_count):
    """Round-robin stripe assignment; deterministic."""
    if stripe_count < 1:
        raise ValueError("stripe_count must be >= 1")
    return block_index % stripe_count


@dataclass(frozen=True)
class StripePlan:
    """Round-robin partition of a block plan across stripe servers."""
    stripe_count: int
    block_size: int

    def blocks_for_stripe(self, target, stripe_index):
        return [
            blk for k, blk in enumerate(plan_blocks(target, self.block_size))
            if assign_stripe(k, self.stripe_count) == stripe_index
        ]


def remaining_after(marker: RangeSet, target) -> RangeSet:
    """target minus marker; empty iff the transfer is complete."""
    start, end = target
    want = RangeSet([(start, end)]) if start < end else RangeSet()
    if not marker.issubset(want):
        raise MarkerOutsideTarget("marker %r outside target %r" % (marker, target))
    return want.difference(marker)


# ---------------------------------------------------------------------------
# Sources and sinks
# ---------------------------------------------------------------------------

class FileSource:
    """Positional reads over an open file descriptor."""

    def __init__(self, fd):
        self.fd = fd

    def pread(self, offset, count):
        return os.pread(self.fd, count, offset)


class BytesSource:
    def __init__(self, data):
        self.data = data

    def pread(self, offset, count):
        return self.data[offset:offset + count]


class FileSink:
    """Positional writes over an open file descriptor; flush = fsync."""

    def __init__(self, fd, offset_shift=0):
        self.fd = fd
        self.offset_shift = offset_shift

    def pwrite(self, offset, data):
        os.pwrite(self.fd, data, offset + self.offset_shift)

    def pread(self, offset, count):
        return os.pread(self.fd, count, offset + self.offset_shift)

    def flush(self):
        os.fsync(self.fd)


class MemorySink:
    def __init__(self, size=0):
        self.buf = bytearray(size)
        self.offset_shift = 0

    def pwrite(self, offset, data):
        end = offset + len(data)
        if end > len(self.buf):
            self.buf.extend(b"\0" * (end - len(self.buf)))
        self.buf[offset:end] = data

    def pread(self, offset, count):
        return bytes(self.buf[offset:offset + count])

    def flush(self):
        pass


# ---------------------------------------------------------------------------
# Channels
# ---------------------------------------------------------------------------

def make_preamble(token: bytes) -> bytes:
    nonce = os.urandom(_PREAMBLE_NONCE)
    mac = hmac.new(token, nonce, hashlib.sha256).digest()[:PREAMBLE_LEN - _PREAMBLE_NONCE]
    return nonce + mac


def check_preamble(token: bytes, preamble: bytes) -> bool:
    if len(preamble) != PREAMBLE_LEN:
        return False
    nonce, mac = preamble[:_PREAMBLE_NONCE], preamble[_PREAMBLE_NONCE:]
    want = hmac.new(token, nonce, hashlib.sha256).digest()[:PREAMBLE_LEN - _PREAMBLE_NONCE]
    return hmac.compare_digest(mac, want)


def apply_buffer_size(sock, buffer_size):
    if buffer_size:
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, buffer_size)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, buffer_size)


class BlockChannel:
    """One TCP data channel speaking extended blocks."""

    def __init__(self, sock, timeout=DATA_TIMEOUT):
        sock.settimeout(timeout)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.bytes_sent = 0
        self.bytes_received = 0
        self.closed = False

    @classmethod
    def connect(cls, endpoint, token=None, buffer_size=None, timeout=DATA_TIMEOUT):
        """Open a channel to `endpoint`, writing the auth preamble if a
        token is set.  The connecting side always proves itself."""
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        apply_buffer_size(sock, buffer_size)
        sock.settimeout(timeout)
        sock.connect((endpoint.host, endpoint.port))
        ch = cls(sock, timeout=timeout)
        if token is not None:
            ch.sock.sendall(make_preamble(token))
        return ch

    @classmethod
    def accept(cls, sock, token=None, timeout=DATA_TIMEOUT):
        """Wrap an accepted socket, verifying the peer's preamble."""
        ch = cls(sock, timeout=timeout)
        if token is not None:
            preamble = ch.rfile.read(PREAMBLE_LEN)
            if preamble is None or not check_preamble(token, preamble):
                ch.close()
                raise DcauMismatch("bad data-channel auth preamble")
        return ch

    def send_block(self, header, payload=b""):
        self.sock.sendall(wire.encode_block(header, payload))
        self.bytes_sent += header.count

    def recv_block(self, max_count=MAX_BLOCK_SIZE):
        got = wire.decode_block(self.rfile, max_count=max_count)
        if got is not None:
            self.bytes_received += got[0].count
        return got

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self.rfile.close()
        except OSError:
            pass
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass

    def __repr__(self):
        try:
            peer = "%s:%d" % self.sock.getpeername()[:2]
        except OSError:
            peer = "closed"
        return "<BlockChannel %s>" % peer


# ---------------------------------------------------------------------------
# Sending
# ---------------------------------------------------------------------------

@dataclass
class SendReport:
    """Outcome of one send_range call."""
    per_channel: dict = field(default_factory=dict)   # id(channel) -> payload bytes
    total_payload: int = 0
    blocks_sent: int = 0
    channels_used: int = 0       # channels whose EOD was delivered
    eof_sent: bool = False
    failures: list = field(default_factory=list)
    survivors: list = field(default_factory=list)


def send_range(channels, blocks, source, spec,
               send_eof=True, eod_extra=0, reconnect=None, max_reopen=2,
               close_channels=False, abort=None):
    """Send `blocks` (a list of [start, end) ranges read from `source`)
    over `channels` with work stealing.

    Every block is sent exactly once as one extended block on some channel;
    a failed channel's unsent blocks are requeued to survivors (after up to
    `max_reopen` reconnect attempts when a `reconnect` callable is given).
    Each surviving channel ends with an EOD block; if `send_eof`, the last
    channel also carries one EOF block whose offset field announces the
    total EOD count (survivors + `eod_extra`).

    Raises AllChannelsFailed when no channel survives with blocks unsent.
    """
    channels = list(channels)
    if not channels:
        raise AllChannelsFailed(blocks)
    queue = deque(blocks)
    lock = threading.Lock()
    reopen_budget = [max_reopen]
    report = SendReport()
    alive = {id(ch): ch for ch in channels}

    def pop_block():
        with lock:
            return queue.popleft() if queue else None

    def requeue(block):
        with lock:
            queue.appendleft(block)

    def try_reconnect():
        if reconnect is None:
            return None
        with lock:
            if reopen_budget[0] <= 0:
                return None
            reopen_budget[0] -= 1
        try:
            return reconnect()
        except OSError:
            return None

    def worker(ch):
        sent = 0
        while True:
            if abort is not None and abort.is_set():
                break
            block = pop_block()
            if block is None:
                break
            start, end = block
            try:
                payload = source.pread(start, end - start)
                ch.send_block(BlockHeader(0, len(payload), start), payload)
                sent += len(payload)
                with lock:
                    report.blocks_sent += 1
            except (OSError, ValueError) as exc:
                requeue(block)
                with lock:
                    report.failures.append((repr(ch), str(exc)))
                    alive.pop(id(ch), None)
                ch.close()
                fresh = try_reconnect()
                if fresh is None:
                    break
                with lock:
                    alive[id(fresh)] = fresh
                    report.per_channel[id(ch)] = sent
                ch = fresh
                sent = 0
        with lock:
            report.per_channel[id(ch)] = report.per_channel.get(id(ch), 0) + sent

    threads = [threading.Thread(target=worker, args=(ch,), daemon=True)
               for ch in channels]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    survivors = list(alive.values())
    if abort is not None and abort.is_set():
        for ch in survivors:
            ch.close()
        raise ChannelFailure("transfer aborted")
    with lock:
        undone = list(queue)
    if undone:
        raise AllChannelsFailed(undone)

    report.total_payload = sum(report.per_channel.values())

    # EODs first on all but the last survivor, so the EOF can announce an
    # exact delivered-EOD count; the final channel carries EOF then EOD.
    eod_flag = EOD | (CLOSE if close_channels else 0)
    delivered = 0
    tail = None
    for ch in survivors:
        if tail is None and send_eof:
            tail = ch
            continue
        try:
            ch.send_block(BlockHeader(eod_flag, 0, 0))
            delivered += 1
            report.survivors.append(ch)
        except OSError:
            report.failures.append((repr(ch), "EOD send failed"))
            ch.close()
    if send_eof:
        if tail is None:
            raise AllChannelsFailed([])
        try:
            tail.send_block(BlockHeader(EOF, 0, delivered + 1 + eod_extra))
            tail.send_block(BlockHeader(eod_flag, 0, 0))
            delivered += 1
            report.eof_sent = True
            report.survivors.append(tail)
        except OSError:
            report.failures.append((repr(tail), "EOF/EOD send failed"))
            tail.close()
    report.channels_used = delivered
    if close_channels:
        for ch in report.survivors:
            ch.close()
    return report


# ---------------------------------------------------------------------------
# Receiving
# ---------------------------------------------------------------------------

def receive_block(progress: TransferProgress, header: BlockHeader, payload, sink):
    """Apply one decoded block to the sink and progress state.

    Data payloads are written at their absolute offset; EOD/EOF adjust the
    channel accounting; MARKER blocks never touch the sink.  Overlapping
    rewrites must be byte-identical (idempotent retransmit) or the source
    is corrupt and DataConflict is raised.
    """
    if header.is_marker:
        return progress
    if header.is_eof:
        progress.set_eod_expected(header.offset)
        return progress
    if header.is_eod:
        progress.note_eod()
        return progress
    count = header.count
    if count == 0:
        return progress
    offset = header.offset
    if progress.target is not None:
        start, end = progress.target
        if offset < start or offset + count > end:
            raise OutOfRangeBlock(
                "block [%d, %d) outside target [%d, %d)"
                % (offset, offset + count, start, end))
    received, _, _ = progress.snapshot()
    if received.intersects(offset, offset + count):
        existing = sink.pread(offset, count)
        overlap_same = _overlap_identical(received, offset, payload, existing)
        if not overlap_same:
            raise DataConflict("conflicting bytes at offset %d" % offset)
    sink.pwrite(offset, payload)
    progress.note_payload(offset, count)
    return progress


def _overlap_identical(received, offset, payload, existing):
    for s, e in received:
        lo = max(s, offset)
        hi = min(e, offset + len(payload))
        if lo >= hi:
            continue
        if payload[lo - offset:hi - offset] != existing[lo - offset:hi - offset]:
            return False
    return True


class BlockReceiver:
    """Drives reader threads over any number of channels into one sink.

    Channels may be added while the transfer runs (a store accepts
    connections as they arrive).  Progress is flushed durably and reported
    via `on_flush(received_set)` every PERSIST_BYTES received or
    PERSIST_SECS elapsed, whichever comes first, and once at the end.
    """

    def __init__(self, progress, sink, max_count=MAX_BLOCK_SIZE,
                 on_flush=None, flush_bytes=PERSIST_BYTES, flush_secs=PERSIST_SECS,
                 clock=time.monotonic):
        self.progress = progress
        self.sink = sink
        self.max_count = max_count
        self.on_flush = on_flush
        self.flush_bytes = flush_bytes
        self.flush_secs = flush_secs
        self._clock = clock
        self._threads = []
        self._channels = []
        self._drained = []       # channels that ended at a block boundary
        self.errors = []
        self._lock = threading.Lock()
        self._since_flush = 0
        self._last_flush = clock()
        self._wake = threading.Event()

    def add_channel(self, channel):
        t = threading.Thread(target=self._reader, args=(channel,), daemon=True)
        with self._lock:
            self._threads.append(t)
            self._channels.append(channel)
        t.start()

    def _reader(self, channel):
        close_after = False
        drained = False
        try:
            while True:
                got = channel.recv_block(self.max_count)
                if got is None:
                    break
                header, payload = got
                if header.is_close:
                    close_after = True
                receive_block(self.progress, header, payload, self.sink)
                if header.count:
                    self._maybe_flush(header.count)
                self._wake.set()
                if header.is_eod:
                    drained = True
                    break
        except (wire.WireError, DataplaneError, OSError) as exc:
            with self._lock:
                self.errors.append((repr(channel), exc))
            channel.close()
        else:
            if close_after or not drained:
                channel.close()
            elif drained:
                with self._lock:
                    self._drained.append(channel)
        finally:
            self._wake.set()

    def _maybe_flush(self, count):
        with self._lock:
            self._since_flush += count
            now = self._clock()
            due = (self._since_flush >= self.flush_bytes
                   or now - self._last_flush >= self.flush_secs)
            if due:
                self._since_flush = 0
                self._last_flush = now
        if due:
            self._flush()

    def _flush(self):
        self.sink.flush()
        if self.on_flush:
            received, _, _ = self.progress.snapshot()
            self.on_flush(received)

    def wait(self, timeout=None, poll=0.05):
        """Wait for completion or for every reader to stop.

        Returns True iff progress.complete.  A final durable flush runs
        either way, so restart markers reflect everything written.
        """
        deadline = None if timeout is None else self._clock() + timeout
        while True:
            if self.progress.complete:
                break
            with self._lock:
                threads = list(self._threads)
            if threads and all(not t.is_alive() for t in threads):
                break
            if deadline is not None and self._clock() >= deadline:
                break
            self._wake.wait(poll)
            self._wake.clear()
        self._flush()
        return self.progress.complete

    def abort(self):
        """Close every channel; readers unblock and exit."""
        with self._lock:
            channels = list(self._channels)
            self._drained.clear()
        for ch in channels:
            ch.close()
        self._wake.set()

    def take_drained(self):
        """Channels that ended cleanly at a block boundary (cacheable)."""
        with self._lock:
            out = list(self._drained)
            self._drained.clear()
        return out


# ---------------------------------------------------------------------------
# Channel cache
# ---------------------------------------------------------------------------

def cache_key(endpoint, session_id, token):
    token_fp = hashlib.sha256(token or b"").hexdigest()[:12]
    return (str(endpoint), session_id, token_fp)


class ChannelCache:
    """Keeps drained data channels warm for reuse by the next transfer.

    An entry is handed out to at most one transfer; expired entries are
    closed, never reused.
    """

    def __init__(self, ttl=DEFAULT_CHANNEL_TTL, clock=time.monotonic):
        self.ttl = ttl
        self._clock = clock
        self._entries = {}
        self._lock = threading.Lock()

    def checkin(self, key, channel, ttl=None):
        deadline = self._clock() + (self.ttl if ttl is None else ttl)
        with self._lock:
            self._entries.setdefault(key, []).append((channel, deadline))

    def checkout(self, key):
        """Remove and return one unexpired channel for `key`, or None."""
        now = self._clock()
        with self._lock:
            entries = self._entries.get(key, [])
            while entries:
                channel, deadline = entries.pop()
                if deadline > now and not channel.closed:
                    return channel
                channel.close()
            self._entries.pop(key, None)
        return None

    def checkout_group(self, key):
        """Remove and return every unexpired channel cached under `key`."""
        out = []
        while True:
            ch = self.checkout(key)
            if ch is None:
                return out
            out.append(ch)

    def checkin_group(self, key, channels, ttl=None):
        for ch in channels:
            self.checkin(key, ch, ttl)

    def sweep(self):
        now = self._clock()
        with self._lock:
            for key in list(self._entries):
                keep = []
                for channel, deadline in self._entries[key]:
                    if deadline > now and not channel.closed:
                        keep.append((channel, deadline))
                    else:
                        channel.close()
                if keep:
                    self._entries[key] = keep
                else:
                    del self._entries[key]

    def close_all(self):
        with self._lock:
            for entries in self._entries.values():
                for channel, _ in entries:
                    channel.close()
            self._entries.clear()


def cache_checkout(cache: ChannelCache, key):
    return cache.checkout(key)


def cache_checkin(cache: ChannelCache, key, channel, ttl=None):
    cache.checkin(key, channel, ttl)


# ---------------------------------------------------------------------------
# Restart files
# ---------------------------------------------------------------------------

RESTART_FORMAT = "gftp-restart"
RESTART_VERSION = 1


def restart_path(destination) -> str:
    return str(destination) + RESTART_SUFFIX


def write_restart(path, url, target, received: RangeSet, digest):
    """Atomically persist restart state (temp file + rename)."""
    doc = {
        "format": RESTART_FORMAT,
        "version": RESTART_VERSION,
        "url": url,
        "target": [target[0], target[1]],
        "received": [[s, e] for s, e in received],
        "spec_digest": digest,
    }
    tmp = "%s.tmp.%d" % (path, os.getpid())
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_restart(path):
    """Load restart state; returns dict with a real RangeSet under
    "received"."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != RESTART_FORMAT:
        raise ValueError("not a restart file: %s" % path)
    doc["target"] = tuple(doc["target"])
    doc["received"] = RangeSet([tuple(iv) for iv in doc["received"]])
    return doc


def sha256_of_ranges(source, ranges, chunk=1 << 20):
    """Digest the bytes of `source` covered by `ranges`, in offset order."""
    h = hashlib.sha256()
    for start, end in sorted(ranges):
        pos = start
        while pos < end:
            data = source.pread(pos, min(chunk, end - pos))
            if not data:
                break
            h.update(data)
            pos += len(data)
    return h.hexdigest()
