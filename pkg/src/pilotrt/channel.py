"""Pull-based workload channel between the managers and the agents.

Each pilot has an inbox of unit documents (written by the UnitManager,
pulled by the pilot's agent) and all agents share one outbox of state
updates (written by agents, pulled by the UnitManager).  Documents always
travel as serialized copies, never as shared objects.

``latency`` models the round trip of one synchronous write to a remote
store: every ``push_*`` call blocks that long before its documents become
visible.  Bulk pushes pay it once.

The loopback transport exposes the same agent-side interface over a TCP
socket on 127.0.0.1.  Framing is one JSON object per line, UTF-8, keys
sorted, no insignificant whitespace, terminated by ``\\n``.  Every request
gets exactly one reply::

    {"op":"pull","pilot":P,"timeout":T}  ->  {"complete":B,"docs":[...],"op":"units","shutdown":B}
    {"docs":[...],"op":"update","pilot":P}  ->  {"op":"ack"}
    {"op":"status","pilot":P}  ->  {"complete":B,"op":"status","shutdown":B}
"""

from __future__ import annotations

import collections
import json
import logging
import socket
import socketserver
import threading
import time
from typing import Optional

log = logging.getLogger(__name__)


def encode_message(msg: dict) -> bytes:
    return (json.dumps(msg, sort_keys=True, separators=(',', ':')) + '\n').encode('utf-8')


def decode_message(line: bytes) -> dict:
    return json.loads(line.decode('utf-8'))


def _copy(docs) -> list:
    return json.loads(json.dumps(list(docs)))


class WorkloadChannel:
    """In-process channel; thread-safe."""

    def __init__(self, latency: float = 0.0, profiler=None):
        self.latency = latency
        self.profiler = profiler
        self._cond = threading.Condition()
        self._inbox = collections.defaultdict(collections.deque)
        self._sealed: set = set()
        self._seal_seen: set = set()
        self._shutdown: set = set()
        self._updates: collections.deque = collections.deque()
        self.sent_units = 0
        self.sent_updates = 0

    def _delay(self):
        if self.latency > 0:
            time.sleep(self.latency)

    def _record(self, pilot, label, n):
        if self.profiler is not None:
            self.profiler.record(pilot, 'channel', label, 'n=%d' % n)

    # --- manager side ---------------------------------------------------------
    def push_units(self, pilot: str, docs):
        docs = _copy(docs)
        self._delay()
        with self._cond:
            self._inbox[pilot].extend(docs)
            self.sent_units += len(docs)
            self._cond.notify_all()
        self._record(pilot, 'units_sent', len(docs))

    def seal(self, pilot: str):
        """Mark the pilot's workload as complete (for the agent's startup barrier)."""
        with self._cond:
            self._sealed.add(pilot)
            self._cond.notify_all()

    def request_shutdown(self, pilot: str):
        with self._cond:
            self._shutdown.add(pilot)
            self._cond.notify_all()

    def pull_updates(self, timeout: Optional[float] = None) -> list:
        with self._cond:
            if not self._updates:
                self._cond.wait_for(lambda: bool(self._updates), timeout)
            out = list(self._updates)
            self._updates.clear()
        return out

    # --- agent side -----------------------------------------------------------
    def pull_units(self, pilot: str, timeout: Optional[float] = None) -> list:
        with self._cond:
            box = self._inbox[pilot]

            def ready():
                # a fresh seal wakes the puller once so the barrier can lift
                return (bool(box) or pilot in self._shutdown
                        or (pilot in self._sealed and pilot not in self._seal_seen))

            if not ready():
                self._cond.wait_for(ready, timeout)
            if pilot in self._sealed:
                self._seal_seen.add(pilot)
            out = list(box)
            box.clear()
        if out:
            self._record(pilot, 'units_pulled', len(out))
        return out

    def workload_complete(self, pilot: str) -> bool:
        with self._cond:
            return pilot in self._sealed and not self._inbox[pilot]

    def shutdown_requested(self, pilot: str) -> bool:
        with self._cond:
            return pilot in self._shutdown

    def push_updates(self, pilot: str, docs):
        docs = _copy(docs)
        self._delay()
        with self._cond:
            self._updates.extend(docs)
            self.sent_updates += len(docs)
            self._cond.notify_all()
        self._record(pilot, 'updates_sent', len(docs))

    def close(self):
        pass


# ------------------------------------------------------------------------------
# loopback transport

class _Handler(socketserver.StreamRequestHandler):

    def handle(self):
        chan = self.server.channel
        for line in self.rfile:
            if not line.strip():
                continue
            msg = decode_message(line)
            op = msg.get('op')
            pilot = msg.get('pilot')
            if op == 'pull':
                docs = chan.pull_units(pilot, msg.get('timeout'))
                reply = {'op': 'units', 'docs': docs,
                         'complete': chan.workload_complete(pilot),
                         'shutdown': chan.shutdown_requested(pilot)}
            elif op == 'update':
                chan.push_updates(pilot, msg.get('docs', []))
                reply = {'op': 'ack'}
            elif op == 'status':
                reply = {'op': 'status',
                         'complete': chan.workload_complete(pilot),
                         'shutdown': chan.shutdown_requested(pilot)}
            else:
                reply = {'op': 'error', 'error': 'unknown op %r' % op}
            self.wfile.write(encode_message(reply))
            self.wfile.flush()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class LoopbackChannelServer:
    """Serve the agent side of ``channel`` on 127.0.0.1."""

    def __init__(self, channel: WorkloadChannel, port: int = 0):
        self.channel = channel
        self._server = _Server(('127.0.0.1', port), _Handler)
        self._server.channel = channel
        self.address = self._server.server_address
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name='channel-server', daemon=True)
        self._thread.start()

    def close(self):
        self._server.shutdown()
        self._server.server_close()


class _Conn:
    def __init__(self, address):
        host, port = address
        self.sock = socket.create_connection((host, int(port)))
        self.rfile = self.sock.makefile('rb')
        self.lock = threading.Lock()

    def call(self, msg: dict) -> dict:
        with self.lock:
            self.sock.sendall(encode_message(msg))
            line = self.rfile.readline()
        if not line:
            raise ConnectionError('channel server closed the connection')
        return decode_message(line)

    def close(self):
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


class LoopbackChannelClient:
    """Agent-side channel endpoint speaking the line protocol.

    Pulls use their own connection so a blocking pull never delays updates.
    """

    def __init__(self, address):
        self._pull = _Conn(address)
        self._ctl = _Conn(address)
        self._shutdown: dict = {}

    def pull_units(self, pilot: str, timeout: Optional[float] = None) -> list:
        reply = self._pull.call({'op': 'pull', 'pilot': pilot, 'timeout': timeout})
        if reply['shutdown']:
            self._shutdown[pilot] = True
        return reply['docs']

    def workload_complete(self, pilot: str) -> bool:
        return self._ctl.call({'op': 'status', 'pilot': pilot})['complete']

    def shutdown_requested(self, pilot: str) -> bool:
        if self._shutdown.get(pilot):
            return True
        reply = self._ctl.call({'op': 'status', 'pilot': pilot})
        self._shutdown[pilot] = reply['shutdown']
        return reply['shutdown']

    def push_updates(self, pilot: str, docs):
        self._ctl.call({'op': 'update', 'pilot': pilot, 'docs': list(docs)})

    def close(self):
        self._pull.close()
        self._ctl.close()
