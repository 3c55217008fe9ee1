"""Control plane of the simulated operator.

A small HTTP API next to the gateway:

    GET  /quota/<subscriber_id>   -> {"remaining_bytes": .., "granularity_bytes": ..}
    GET  /flows                   -> {"flows": [..]} observed flow records
    GET  /state                   -> metering totals and the conservation check
    PUT  /profile                 -> replace the operator profile (fresh meter)
    POST /session                 -> {"kind": "domestic"|"roaming"}

The quota endpoint is what the credit adapter polls; the rest exists for
orchestration and tests.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .gateway import GatewayServer, NetworkMap
from .metering import Meter
from .rules import OperatorProfile, SessionKind

log = logging.getLogger(__name__)


class MnoSim:
    """Gateway + meter + control API for one simulated operator."""

    def __init__(self, profile: OperatorProfile, network_map: NetworkMap,
                 host: str = "127.0.0.1"):
        self.profile = profile
        self.network_map = network_map
        self.host = host
        self.meter = Meter(profile)
        self.gateway = GatewayServer(self.meter, network_map, host=host)
        self._control: ThreadingHTTPServer | None = None
        self._control_thread: threading.Thread | None = None

    @property
    def control_port(self) -> int:
        return self._control.server_address[1]

    @property
    def tcp_port(self) -> int:
        return self.gateway.tcp_port

    @property
    def udp_port(self) -> int:
        return self.gateway.udp_port

    def quota_url(self) -> str:
        return f"http://{self.host}:{self.control_port}/quota/{self.profile.subscriber_id}"

    def start(self) -> None:
        self.gateway.start()
        sim = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # quiet
                log.debug("control: " + fmt, *args)

            def _reply(self, code: int, payload: dict) -> None:
                body = json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def _body_json(self) -> dict:
                length = int(self.headers.get("Content-Length", "0"))
                return json.loads(self.rfile.read(length).decode("utf-8"))

            def do_GET(self):
                if self.path.startswith("/quota/"):
                    subscriber = self.path[len("/quota/"):]
                    if subscriber != sim.profile.subscriber_id:
                        self._reply(404, {"error": "unknown subscriber"})
                        return
                    self._reply(200, {
                        "remaining_bytes": sim.meter.remaining(),
                        "granularity_bytes": sim.profile.granularity,
                    })
                elif self.path == "/flows":
                    self._reply(200, {"flows": [f.to_dict() for f in sim.meter.flows()]})
                elif self.path == "/state":
                    meter = sim.meter
                    self._reply(200, {
                        "operator": sim.profile.name,
                        "session_kind": sim.gateway.session_kind.value,
                        "metered_total": meter.metered_total,
                        "billed_total": meter.billed_total,
                        "pool_bytes": meter.pool_bytes(),
                        "overdraft": meter.overdraft,
                        "conservation_holds": meter.conservation_holds(),
                    })
                else:
                    self._reply(404, {"error": "not found"})

            def do_PUT(self):
                if self.path != "/profile":
                    self._reply(404, {"error": "not found"})
                    return
                try:
                    profile = OperatorProfile.from_dict(self._body_json())
                except (ValueError, KeyError) as exc:
                    self._reply(400, {"error": str(exc)})
                    return
                sim.load_profile(profile)
                self._reply(200, {"ok": True, "operator": profile.name})

            def do_POST(self):
                if self.path != "/session":
                    self._reply(404, {"error": "not found"})
                    return
                try:
                    kind = SessionKind(self._body_json().get("kind"))
                except (ValueError, KeyError) as exc:
                    self._reply(400, {"error": str(exc)})
                    return
                sim.gateway.session_kind = kind
                self._reply(200, {"ok": True, "session_kind": kind.value})

        self._control = ThreadingHTTPServer((self.host, 0), Handler)
        self._control.daemon_threads = True
        self._control_thread = threading.Thread(
            target=self._control.serve_forever, daemon=True
        )
        self._control_thread.start()

    def load_profile(self, profile: OperatorProfile) -> None:
        """Swap in a new operator profile with a fresh meter."""
        self.profile = profile
        self.meter = Meter(profile)
        self.gateway.meter = self.meter

    def set_session(self, kind: SessionKind) -> None:
        self.gateway.session_kind = kind

    def stop(self) -> None:
        if self._control is not None:
            self._control.shutdown()
            self._control.server_close()
        if self._control_thread is not None:
            self._control_thread.join(timeout=1.0)
        self.gateway.stop()
