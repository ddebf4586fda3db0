"""The transfer daemon.

Accepts control connections on the command port, runs the per-session
authentication and command state machine, allocates data endpoints in a
configured port range, executes stores and retrieves (whole, partial, and
striped), and emits restart markers while receiving.

A host configured with stripe nodes acts as a striping coordinator: SPAS
gathers one passive data endpoint from every node over internal control
connections (same wire grammar), and RETR/ERET fan out to the nodes, each
of which serves only its own round-robin share of the block plan.

Run it with `gftpd --config <path> [--port N] [--root DIR]
[--stripe-node host:port]...`.
"""

import argparse
import base64
import errno
import hashlib
import hmac
import os
import re
import secrets as pysecrets
import socket
import sys
import threading
import uuid

from . import dataplane as dp
from . import wire
from .wire import DataEndpoint, RangeSet, Reply

DEFAULT_PORT = 2811
DEFAULT_PORT_RANGE = (50000, 50400)
GREETING = "gftp service ready"

_CHANNELS_RE = re.compile(r"channels=(\d+)")
_SHA256_RE = re.compile(r"sha256=([0-9a-f]{64})")


class ConfigError(Exception):
    pass


class ServerConfig:
    """Flat key=value configuration, overridable by GFTP_* environment
    variables and CLI flags."""

    def __init__(self, **kw):
        self.host = kw.pop("host", "127.0.0.1")
        self.port = int(kw.pop("port", DEFAULT_PORT))
        self.root = kw.pop("root", ".")
        self.secrets_file = kw.pop("secrets_file", None)
        pr = kw.pop("port_range", DEFAULT_PORT_RANGE)
        if isinstance(pr, str):
            lo, hi = pr.split("-")
            pr = (int(lo), int(hi))
        self.port_range = tuple(pr)
        self.advertise_host = kw.pop("advertise_host", None)
        self.advertise_port_offset = int(kw.pop("advertise_port_offset", 0))
        self.marker_bytes = int(kw.pop("marker_bytes", dp.PERSIST_BYTES))
        self.marker_secs = float(kw.pop("marker_secs", dp.PERSIST_SECS))
        self.channel_ttl = float(kw.pop("channel_ttl", dp.DEFAULT_CHANNEL_TTL))
        self.max_auth_failures = int(kw.pop("max_auth_failures", 3))
        self.idle_timeout = float(kw.pop("idle_timeout", 300.0))
        self.data_timeout = float(kw.pop("data_timeout", dp.DATA_TIMEOUT))
        nodes = kw.pop("stripe_nodes", ())
        if isinstance(nodes, str):
            nodes = [n for n in nodes.replace(",", " ").split() if n]
        self.stripe_nodes = tuple(nodes)
        self.stripe_credentials = kw.pop("stripe_credentials", None)
        if kw:
            raise ConfigError("unknown config keys: %s" % ", ".join(sorted(kw)))

    @classmethod
    def load(cls, path=None, env=os.environ, **overrides):
        """defaults < config file < environment < explicit overrides"""
        values = {}
        if path:
            values.update(parse_config_file(path))
        if "GFTP_PORT" in env:
            values["port"] = env["GFTP_PORT"]
        if "GFTP_ROOT" in env:
            values["root"] = env["GFTP_ROOT"]
        for key, val in overrides.items():
            if val is not None:
                values[key] = val
        return cls(**values)


def parse_config_file(path):
    """INI-style key=value lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key=value" % (path, lineno))
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def load_secrets(path):
    """Shared-secret store: one "name:hex_secret" per line."""
    table = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            name, hexsecret = line.split(":", 1)
            table[name.strip()] = bytes.fromhex(hexsecret.strip())
    return table


def derive_session_key(secret: bytes, nonce: bytes) -> bytes:
    """Per-session data-channel token, derived on both ends after auth."""
    return hmac.new(secret, nonce + b"session", hashlib.sha256).digest()


def auth_response(secret: bytes, nonce: bytes) -> bytes:
    return hmac.new(secret, nonce, hashlib.sha256).digest()


# Session states
CONNECTED = "CONNECTED"
AUTHENTICATING = "AUTHENTICATING"
AUTHENTICATED = "AUTHENTICATED"
TRANSFERRING = "TRANSFERRING"

DATA_VERBS = {"RETR", "STOR", "ERET", "ESTO"}
# verbs usable before authentication completes
PREAUTH_VERBS = {"USER", "AUTH", "ADAT", "QUIT"}


class PortRangeExhausted(Exception):
    pass


class DataListener:
    """One passive listener bound inside the configured port range."""

    def __init__(self, config, buffer_size=None):
        lo, hi = config.port_range
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        dp.apply_buffer_size(sock, buffer_size)
        bound = None
        for port in range(lo, hi + 1):
            try:
                sock.bind((config.host, port))
                bound = port
                break
            except OSError:
                continue
        if bound is None:
            sock.close()
            raise PortRangeExhausted("no free port in %d-%d" % (lo, hi))
        sock.listen(64)
        self.sock = sock
        self.port = bound
        host = config.advertise_host or config.host
        self.advertised = DataEndpoint(host, bound + config.advertise_port_offset)

    def accept_channels(self, count, token, timeout, overall=10.0):
        """Accept up to `count` preamble-verified channels; returns what
        arrived before the deadline."""
        channels = []
        self.sock.settimeout(0.25)
        deadline = _now() + overall
        while len(channels) < count and _now() < deadline:
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                if channels:
                    break  # sender decided to use fewer channels
                continue
            try:
                channels.append(dp.BlockChannel.accept(conn, token=token, timeout=timeout))
            except dp.DcauMismatch:
                continue
        return channels

    def accept_one(self, token, timeout, poll=0.2):
        self.sock.settimeout(poll)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            return None
        try:
            return dp.BlockChannel.accept(conn, token=token, timeout=timeout)
        except dp.DcauMismatch:
            return None

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


def _now():
    import time
    return time.monotonic()


class Session(threading.Thread):
    """One control connection: serialized command handling, at most one
    active transfer."""

    def __init__(self, server, sock, addr):
        super().__init__(daemon=True)
        self.server = server
        self.config = server.config
        self.sock = sock
        self.addr = addr
        self.rfile = sock.makefile("rb")
        self.session_id = uuid.uuid4().hex
        self.state = CONNECTED
        self.username = None
        self.identity = None
        self.session_key = None
        self.auth_nonce = None
        self.auth_failures = 0
        self.data_token = None
        self.parallelism = dp.DEFAULT_PARALLELISM
        self.block_size = wire.DEFAULT_BLOCK_SIZE
        self.buffer_size = None
        self.checksum_replies = False
        self.stripe_filter = None      # (index, count, block_size, suppress_eof)
        self.restart_set = None        # RangeSet from REST
        self.listener = None
        self.port_endpoint = None
        self.stripe_group = None       # coordinator fan-out state
        self.transfer_thread = None
        self.abort_event = threading.Event()
        self._reply_lock = threading.Lock()
        self._closing = False

    # -- plumbing ----------------------------------------------------------

    def send_reply(self, code, *lines):
        text = wire.render_reply(Reply(code, tuple(lines)))
        with self._reply_lock:
            try:
                self.sock.sendall(text.encode("ascii"))
            except OSError:
                self._closing = True

    def run(self):
        try:
            self.sock.settimeout(self.config.idle_timeout)
            self.send_reply(220, GREETING)
            while not self._closing:
                try:
                    raw = self.rfile.readline(wire.MAX_LINE + 2)
                except (socket.timeout, OSError):
                    break
                if not raw:
                    break
                if not raw.endswith(b"\n"):
                    self.send_reply(500, "Line too long")
                    continue
                try:
                    cmd = wire.parse_command(raw.decode("latin-1"))
                except wire.MalformedLine as exc:
                    self.send_reply(500, "Malformed command: %s" % exc)
                    continue
                self.dispatch(cmd)
        finally:
            self.cleanup()

    def dispatch(self, cmd):
        verb = cmd.verb
        if self.transfer_active and verb not in ("ABOR", "QUIT"):
            self.send_reply(503, "Transfer in progress")
            return
        if not cmd.known:
            self.send_reply(500, "Unknown command %s" % verb)
            return
        if self.state != AUTHENTICATED and verb not in PREAUTH_VERBS:
            self.send_reply(530, "Please authenticate first")
            return
        handler = getattr(self, "cmd_" + verb.lower())
        try:
            handler(cmd)
        except PortRangeExhausted:
            self.send_reply(425, "Data port range exhausted")
        except Exception as exc:  # keep the session alive on handler bugs
            self.send_reply(451, "Internal error: %s" % exc)

    @property
    def transfer_active(self):
        t = self.transfer_thread
        return t is not None and t.is_alive()

    def cleanup(self):
        self._closing = True
        self.abort_event.set()
        self.drop_pending_endpoints()
        self.close_stripe_group()
        self.server.cache.close_all_for(self.session_id)
        try:
            self.rfile.close()
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass
        self.server.forget(self)

    def drop_pending_endpoints(self):
        if self.listener is not None:
            self.listener.close()
            self.listener = None
        self.port_endpoint = None

    def close_stripe_group(self):
        group = self.stripe_group
        self.stripe_group = None
        if group is not None:
            group.close()

    # -- authentication ----------------------------------------------------

    def cmd_user(self, cmd):
        if self.state == AUTHENTICATED:
            self.send_reply(503, "Already authenticated")
            return
        if len(cmd.args) != 1:
            self.send_reply(501, "USER needs a name")
            return
        self.username = cmd.args[0]
        self.state = CONNECTED
        self.send_reply(331, "Send AUTH HMAC to continue")

    def cmd_auth(self, cmd):
        if self.state == AUTHENTICATED:
            self.send_reply(503, "Already authenticated")
            return
        if len(cmd.args) != 1 or cmd.args[0].upper() != "HMAC":
            self.send_reply(504, "Only AUTH HMAC is supported")
            return
        if self.username is None:
            self.send_reply(503, "Send USER first")
            return
        self.auth_nonce = pysecrets.token_bytes(16)
        self.state = AUTHENTICATING
        self.send_reply(334, base64.b64encode(self.auth_nonce).decode("ascii"))

    def cmd_adat(self, cmd):
        if self.state != AUTHENTICATING or self.auth_nonce is None:
            self.send_reply(503, "Send AUTH HMAC first")
            return
        if len(cmd.args) != 1:
            self.send_reply(501, "ADAT needs one base64 argument")
            return
        try:
            mac = base64.b64decode(cmd.args[0], validate=True)
        except Exception:
            self.send_reply(501, "Bad base64")
            return
        secret = self.server.secrets.get(self.username)
        expected = auth_response(secret, self.auth_nonce) if secret else None
        if expected is not None and hmac.compare_digest(mac, expected):
            self.identity = self.username
            self.session_key = derive_session_key(secret, self.auth_nonce)
            self.data_token = self.session_key
            self.state = AUTHENTICATED
            self.send_reply(235, "User authenticated")
            return
        self.auth_failures += 1
        if self.auth_failures >= self.config.max_auth_failures:
            self.send_reply(535, "Authentication failed; closing")
            self._closing = True
        else:
            self.send_reply(535, "Authentication failed")

    # -- endpoint negotiation ----------------------------------------------

    def cmd_pasv(self, cmd):
        self.drop_pending_endpoints()
        self.server.cache.close_all_for(self.session_id)
        self.listener = DataListener(self.config, buffer_size=self.buffer_size)
        self.send_reply(227, "Entering Passive Mode (%s)"
                        % wire.render_hostport(self.listener.advertised))

    def cmd_port(self, cmd):
        if len(cmd.args) != 1:
            self.send_reply(501, "PORT needs a host-port argument")
            return
        try:
            ep = wire.parse_hostport(cmd.args[0])
        except wire.MalformedEndpoint as exc:
            self.send_reply(501, str(exc))
            return
        self.drop_pending_endpoints()
        self.server.cache.close_all_for(self.session_id)
        self.port_endpoint = ep
        self.send_reply(200, "PORT accepted")

    def cmd_spas(self, cmd):
        if not self.config.stripe_nodes:
            self.send_reply(504, "Not a striping coordinator")
            return
        self.drop_pending_endpoints()
        self.close_stripe_group()
        from .client import StripeGroup, ClientError
        try:
            group = StripeGroup.setup(
                nodes=self.config.stripe_nodes,
                credentials_path=self.config.stripe_credentials,
                parallelism=self.parallelism,
                token=self.data_token,
                block_size=self.block_size,
            )
        except (ClientError, OSError) as exc:
            self.send_reply(425, "Stripe node unavailable: %s" % exc)
            return
        self.stripe_group = group
        self.send_reply(*_spas_reply_args(group.endpoints))

    def cmd_spor(self, cmd):
        if not self.config.stripe_nodes:
            self.send_reply(504, "Not a striping coordinator")
            return
        if len(cmd.args) != len(self.config.stripe_nodes):
            self.send_reply(501, "SPOR needs one host-port per stripe node")
            return
        try:
            endpoints = [wire.parse_hostport(a) for a in cmd.args]
        except wire.MalformedEndpoint as exc:
            self.send_reply(501, str(exc))
            return
        self.drop_pending_endpoints()
        self.close_stripe_group()
        from .client import StripeGroup, ClientError
        try:
            group = StripeGroup.setup(
                nodes=self.config.stripe_nodes,
                credentials_path=self.config.stripe_credentials,
                parallelism=self.parallelism,
                token=self.data_token,
                block_size=self.block_size,
                port_endpoints=endpoints,
            )
        except (ClientError, OSError) as exc:
            self.send_reply(425, "Stripe node unavailable: %s" % exc)
            return
        self.stripe_group = group
        self.send_reply(200, "Striped active mode accepted")

    # -- options -----------------------------------------------------------

    def cmd_opts(self, cmd):
        if not cmd.args:
            self.send_reply(501, "OPTS needs a target")
            return
        target = cmd.args[0].upper()
        opts = _parse_opts(" ".join(cmd.args[1:]))
        if target == "RETR":
            if "PARALLELISM" in opts:
                try:
                    p = int(opts["PARALLELISM"])
                    if p < 1:
                        raise ValueError
                except ValueError:
                    self.send_reply(501, "Bad Parallelism value")
                    return
                self.parallelism = p
            if "BLOCKSIZE" in opts:
                bs = int(opts["BLOCKSIZE"])
                if not wire.MIN_BLOCK_SIZE <= bs <= wire.MAX_BLOCK_SIZE:
                    self.send_reply(501, "BlockSize out of bounds")
                    return
                self.block_size = bs
            self.send_reply(200, "RETR options accepted")
        elif target == "DCAU":
            if "S" in opts:
                try:
                    self.data_token = base64.b64decode(opts["S"], validate=True)
                except Exception:
                    self.send_reply(501, "Bad DCAU token")
                    return
                self.send_reply(200, "Data channel authentication set")
            elif "N" in opts or opts.get("", "").upper() == "N" or \
                    (cmd.args[1:] and cmd.args[1].rstrip(";").upper() == "N"):
                self.data_token = None
                self.send_reply(200, "Data channel authentication disabled")
            else:
                self.send_reply(501, "DCAU wants S=<base64> or N")
        elif target == "STRIPE":
            try:
                index = int(opts["INDEX"])
                count = int(opts["COUNT"])
                bs = int(opts.get("BLOCKSIZE", self.block_size))
                suppress = opts.get("SUPPRESSEOF", "0") == "1"
                if not 0 <= index < count:
                    raise ValueError
            except (KeyError, ValueError):
                self.send_reply(501, "STRIPE wants Index=i;Count=n;")
                return
            self.stripe_filter = (index, count, bs, suppress)
            self.send_reply(200, "Stripe filter set")
        elif target == "CKSM":
            self.checksum_replies = opts.get("ON", "1") == "1"
            self.send_reply(200, "Checksum replies %s"
                            % ("enabled" if self.checksum_replies else "disabled"))
        else:
            self.send_reply(501, "Unknown OPTS target %s" % target)

    def cmd_sbuf(self, cmd):
        if len(cmd.args) != 1 or not cmd.args[0].isdigit():
            self.send_reply(501, "SBUF needs a byte count")
            return
        self.buffer_size = int(cmd.args[0])
        self.send_reply(200, "Buffer size set to %d" % self.buffer_size)

    def cmd_rest(self, cmd):
        if len(cmd.args) != 1:
            self.send_reply(501, "REST needs an offset or range list")
            return
        arg = cmd.args[0]
        try:
            if "-" in arg:
                ivals = []
                for part in arg.split(","):
                    a, b = part.split("-")
                    ivals.append((int(a), int(b)))
                self.restart_set = RangeSet(ivals)
            else:
                off = int(arg)
                self.restart_set = RangeSet([(0, off)]) if off > 0 else RangeSet()
        except (ValueError, wire.EmptyInterval):
            self.send_reply(501, "Bad restart specification")
            return
        self.send_reply(350, "Restart marker accepted")

    def cmd_size(self, cmd):
        if not cmd.args:
            self.send_reply(501, "SIZE needs a path")
            return
        path = self.resolve(cmd.arg_tail(0))
        if path is None or not os.path.isfile(path):
            self.send_reply(550, "No such file")
            return
        self.send_reply(213, str(os.path.getsize(path)))

    def cmd_abor(self, cmd):
        if self.transfer_active:
            self.abort_event.set()
            t = self.transfer_thread
            if t is not None:
                t.join(timeout=10)
        self.send_reply(226, "ABOR processed")

    def cmd_quit(self, cmd):
        if self.transfer_active:
            self.abort_event.set()
            t = self.transfer_thread
            if t is not None:
                t.join(timeout=5)
        self.send_reply(221, "Goodbye")
        self._closing = True

    # -- transfers ----------------------------------------------------------

    def cmd_retr(self, cmd):
        if not cmd.args:
            self.send_reply(501, "RETR needs a path")
            return
        self.start_transfer(self.run_retrieve, cmd.arg_tail(0), None)

    def cmd_eret(self, cmd):
        if len(cmd.args) < 4 or cmd.args[0].upper() != "P":
            self.send_reply(501, "ERET wants: P <offset> <length> <path>")
            return
        try:
            offset, length = int(cmd.args[1]), int(cmd.args[2])
            if offset < 0 or length < 0:
                raise ValueError
        except ValueError:
            self.send_reply(501, "Bad ERET range")
            return
        self.start_transfer(self.run_retrieve, cmd.arg_tail(3), (offset, length))

    def cmd_stor(self, cmd):
        if not cmd.args:
            self.send_reply(501, "STOR needs a path")
            return
        self.start_transfer(self.run_store, cmd.arg_tail(0), 0)

    def cmd_esto(self, cmd):
        if len(cmd.args) < 3 or cmd.args[0].upper() != "A":
            self.send_reply(501, "ESTO wants: A <offset> <path>")
            return
        try:
            shift = int(cmd.args[1])
            if shift < 0:
                raise ValueError
        except ValueError:
            self.send_reply(501, "Bad ESTO offset")
            return
        self.start_transfer(self.run_store, cmd.arg_tail(2), shift)

    def start_transfer(self, fn, *args):
        self.abort_event.clear()
        self.state = TRANSFERRING

        def runner():
            try:
                fn(*args)
            except Exception as exc:
                self.send_reply(451, "Internal transfer error: %s" % exc)
            finally:
                self.state = AUTHENTICATED

        self.transfer_thread = threading.Thread(target=runner, daemon=True)
        self.transfer_thread.start()

    def resolve(self, relpath):
        root = os.path.abspath(self.config.root)
        full = os.path.normpath(os.path.join(root, relpath.lstrip("/")))
        if full != root and not full.startswith(root + os.sep):
            return None
        return full

    def acquire_channels(self, count, for_store=False):
        """Channels for the next transfer: freshly negotiated endpoints win;
        otherwise reuse the session's cached group."""
        if self.listener is not None:
            channels = self.listener.accept_channels(
                count, self.data_token, self.config.data_timeout)
            return channels, "accept"
        if self.port_endpoint is not None:
            channels = []
            for _ in range(count):
                channels.append(dp.BlockChannel.connect(
                    self.port_endpoint, token=self.data_token,
                    buffer_size=self.buffer_size, timeout=self.config.data_timeout))
            return channels, "connect"
        key = dp.cache_key("session", self.session_id, self.data_token)
        cached = self.server.cache.checkout_group(key)
        if cached:
            return cached, "cache"
        return [], "none"

    def finish_channels(self, channels):
        """Return drained channels to the cache for the next transfer."""
        key = dp.cache_key("session", self.session_id, self.data_token)
        self.server.cache.checkin_group(key, channels, ttl=self.config.channel_ttl)
        if self.listener is not None:
            self.listener.close()
            self.listener = None
        self.port_endpoint = None

    def transfer_complete_reply(self, channels_used, sha=None):
        extra = "channels=%d" % channels_used
        if sha:
            extra += ",sha256=%s" % sha
        self.send_reply(226, "Transfer complete (%s)" % extra)

    def run_retrieve(self, relpath, partial):
        if self.stripe_group is not None:
            self.run_striped_retrieve(relpath, partial)
            return
        path = self.resolve(relpath)
        if path is None or not os.path.isfile(path):
            self.send_reply(550, "No such file")
            return
        size = os.path.getsize(path)
        if partial is None:
            start, end = 0, size
        else:
            start, end = partial[0], partial[0] + partial[1]
            if end > size:
                self.send_reply(551, "Range out of bounds")
                return
        send_set = RangeSet([(start, end)]) if start < end else RangeSet()
        restart = self.restart_set
        self.restart_set = None
        if restart is not None and restart.issubset(send_set):
            send_set = send_set.difference(restart)

        if self.stripe_filter is not None:
            index, count, bs, suppress = self.stripe_filter
            plan = dp.StripePlan(count, bs)
            blocks = plan.blocks_for_stripe((start, end), index)
            send_eof = not suppress
        else:
            blocks = [b for iv in send_set for b in dp.plan_blocks(iv, self.block_size)]
            send_eof = True

        channels, how = self.acquire_channels(self.parallelism)
        if not channels:
            self.send_reply(425, "Use PASV or PORT first")
            return
        self.send_reply(150, "Opening extended block mode data connection")
        fd = os.open(path, os.O_RDONLY)
        try:
            source = dp.FileSource(fd)
            report = dp.send_range(channels, blocks, source,
                                   dp.TransferSpec(parallelism=len(channels),
                                                   block_size=self.block_size),
                                   send_eof=send_eof, abort=self.abort_event)
            sha = None
            if self.checksum_replies:
                sha = dp.sha256_of_ranges(source, blocks)
            self.finish_channels(report.survivors)
            self.transfer_complete_reply(report.channels_used, sha)
        except dp.DataplaneError:
            for ch in channels:
                ch.close()
            self.send_reply(426, "Data connection failed; transfer aborted")
        finally:
            os.close(fd)

    def run_striped_retrieve(self, relpath, partial):
        group = self.stripe_group
        path = self.resolve(relpath)
        if path is None or not os.path.isfile(path):
            self.send_reply(550, "No such file")
            return
        size = os.path.getsize(path)
        if partial is None:
            start, length = 0, size
        else:
            start, length = partial
            if start + length > size:
                self.send_reply(551, "Range out of bounds")
                return
        self.restart_set = None
        self.send_reply(150, "Opening striped data connection")
        try:
            total_channels = group.fanout_fetch(relpath, start, length)
        except Exception as exc:
            self.send_reply(426, "Striped transfer failed: %s" % exc)
            return
        self.transfer_complete_reply(total_channels)

    def run_store(self, relpath, shift):
        path = self.resolve(relpath)
        if path is None or not os.path.isdir(os.path.dirname(path) or "."):
            self.send_reply(553, "Bad destination path")
            return
        rpath = dp.restart_path(path)
        resuming = os.path.exists(rpath)
        try:
            fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
            if not resuming and shift == 0:
                os.ftruncate(fd, 0)
        except OSError as exc:
            code = 552 if exc.errno == errno.ENOSPC else 553
            self.send_reply(code, "Cannot open destination: %s" % exc)
            return

        progress = dp.TransferProgress(target=None)
        if resuming:
            try:
                prior = dp.read_restart(rpath)["received"]
                for s, e in prior:
                    progress.received = progress.received.insert(s, e)
            except (ValueError, OSError):
                pass
        sink = dp.FileSink(fd, offset_shift=shift)

        def on_flush(received):
            if received:
                dp.write_restart(rpath, relpath, (0, received.intervals[-1][1]),
                                 received, "server")
                self.send_reply(111, wire.render_range_marker(received))

        rx = dp.BlockReceiver(progress, sink, max_count=wire.MAX_BLOCK_SIZE,
                              on_flush=on_flush,
                              flush_bytes=self.config.marker_bytes,
                              flush_secs=self.config.marker_secs)
        channels, how = self.acquire_channels(self.parallelism, for_store=True)
        if not channels and how != "accept" and self.listener is None:
            os.close(fd)
            self.send_reply(425, "Use PASV or PORT first")
            return
        self.send_reply(150, "Ready to receive extended blocks")
        for ch in channels:
            rx.add_channel(ch)
        try:
            listener = self.listener
            deadline = _now() + self.config.data_timeout
            while not progress.complete and not self.abort_event.is_set():
                if listener is not None:
                    ch = listener.accept_one(self.data_token, self.config.data_timeout)
                    if ch is not None:
                        rx.add_channel(ch)
                        deadline = _now() + self.config.data_timeout
                        continue
                if rx.wait(timeout=0.2):
                    break
                alive = any(t.is_alive() for t in rx._threads)
                if alive:
                    deadline = _now() + self.config.data_timeout
                elif _now() > deadline or (rx._threads and listener is None):
                    break
            if self.abort_event.is_set():
                rx.abort()
            complete = rx.wait(timeout=1.0)
        finally:
            try:
                sink.flush()
            except OSError:
                complete = False
        if complete:
            sha = None
            if self.checksum_replies:
                received, _, _ = progress.snapshot()
                sha = dp.sha256_of_ranges(dp.FileSink(fd, offset_shift=shift),
                                          list(received))
            try:
                os.unlink(rpath)
            except OSError:
                pass
            self.finish_channels(rx.take_drained())
            os.close(fd)
            self.transfer_complete_reply(progress.eod_seen, sha)
        else:
            received, _, _ = progress.snapshot()
            if received:
                dp.write_restart(rpath, relpath, (0, received.intervals[-1][1]),
                                 received, "server")
            rx.abort()
            os.close(fd)
            self.send_reply(426, "Transfer incomplete; restart marker saved")


def _parse_opts(text):
    """Parse "Key=Val;Key2=Val2;" option strings (case-insensitive keys)."""
    opts = {}
    for piece in text.replace(";", " ").split():
        if "=" in piece:
            key, val = piece.split("=", 1)
            opts[key.strip().upper()] = val.strip()
        else:
            opts[piece.strip().upper()] = "1"
    return opts


def _spas_reply_args(endpoints):
    r = wire.render_spas_reply(endpoints)
    return (r.code, *r.lines)


class SessionCache(dp.ChannelCache):
    """Channel cache that can drop everything belonging to one session."""

    def close_all_for(self, session_id):
        with self._lock:
            for key in list(self._entries):
                if key[1] == session_id:
                    for channel, _ in self._entries.pop(key):
                        channel.close()


class GftpServer:
    """Accepts control connections and runs one Session thread per client."""

    def __init__(self, config: ServerConfig):
        self.config = config
        self.secrets = load_secrets(config.secrets_file) if config.secrets_file else {}
        self.cache = SessionCache(ttl=config.channel_ttl)
        self.sessions = set()
        self._lock = threading.Lock()
        self._sock = None
        self._thread = None
        self._stopping = False

    @property
    def port(self):
        return self._sock.getsockname()[1] if self._sock else None

    def start(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.config.host, self.config.port))
        sock.listen(64)
        self._sock = sock
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()
        return self

    def _accept_loop(self):
        while not self._stopping:
            try:
                conn, addr = self._sock.accept()
            except OSError:
                break
            session = Session(self, conn, addr)
            with self._lock:
                self.sessions.add(session)
            session.start()

    def forget(self, session):
        with self._lock:
            self.sessions.discard(session)

    def stop(self):
        self._stopping = True
        if self._sock:
            try:
                self._sock.close()
            except OSError:
                pass
        with self._lock:
            sessions = list(self.sessions)
        for s in sessions:
            s._closing = True
            try:
                s.sock.close()
            except OSError:
                pass
        self.cache.close_all()

    def serve_forever(self):
        self.start()
        try:
            self._thread.join()
        except KeyboardInterrupt:
            self.stop()


def main(argv=None):
    parser = argparse.ArgumentParser(prog="gftpd", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--port", type=int, help="control port (default %d)" % DEFAULT_PORT)
    parser.add_argument("--root", help="storage root directory")
    parser.add_argument("--host", help="bind address")
    parser.add_argument("--secrets", help="shared-secret file (name:hex per line)")
    parser.add_argument("--stripe-node", action="append", default=None,
                        metavar="HOST:PORT", help="stripe node control endpoint "
                        "(repeat; makes this server a striping coordinator)")
    args = parser.parse_args(argv)
    config = ServerConfig.load(
        args.config,
        port=args.port,
        root=args.root,
        host=args.host,
        secrets_file=args.secrets,
        stripe_nodes=args.stripe_node,
    )
    server = GftpServer(config)
    print("gftpd listening on %s:%d, root %s"
          % (config.host, config.port, os.path.abspath(config.root)))
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
