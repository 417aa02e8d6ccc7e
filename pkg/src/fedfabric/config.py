"""Run configuration: one JSON document describing sites, stores, the relay,
endpoints, topics, proxy policy, steering policy, scales and seeds.

Example (abridged)::

    {
      "run": {"time_scale": 0.0333, "data_scale": 0.01, "seed": 0},
      "relay": {"port": 0, "lease_s": 60},
      "stores": [{"store_id": "kv", "kind": "memory-kv", "port": 0}],
      "sites": {"thinker": {"stores": ["kv"]}, "cpu-site": {"stores": ["kv"]}},
      "endpoints": [{"endpoint_id": "cpu", "site": "cpu-site", "resource_kind": "cpu", "worker_slots": 8}],
      "topics": {"simulate": {"function": "simulate", "endpoint": "cpu"}},
      "proxy": {"topics": {"simulate": {"threshold_bytes": 10000, "store_id": "kv"}}},
      "policy": {"retrain_trigger": "every_n", "retrain_n": 25},
      "app": {}
    }
"""

from __future__ import annotations

import copy
import json
import socket
from dataclasses import dataclass, field
from pathlib import Path

from .endpoint import EndpointSpec
from .errors import ConfigError
from .refcore import StoreKind
from .refcore import ProxyPolicy
from .relay.core import RelayConfig
from .steering import SteeringPolicy, TopicSpec
from .stores.model import StoreConfig

THINKER_SITE = "thinker"


@dataclass
class EndpointConfig:
    endpoint_id: str
    site: str
    resource_kind: str = "cpu"
    worker_slots: int = 1
    token_path: str = ""
    cache_bytes: int = 1 << 30

    @classmethod
    def from_dict(cls, d: dict) -> "EndpointConfig":
        return cls(**d)


@dataclass
class RunConfig:
    raw: dict
    time_scale: float = 1 / 30
    data_scale: float = 1 / 100
    seed: int = 0
    relay: RelayConfig = field(default_factory=RelayConfig)
    stores: dict[str, StoreConfig] = field(default_factory=dict)
    sites: dict[str, list[str]] = field(default_factory=dict)
    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    topics: dict[str, TopicSpec] = field(default_factory=dict)
    proxy: ProxyPolicy = field(default_factory=lambda: ProxyPolicy.from_dict({}))
    policy: SteeringPolicy = field(default_factory=SteeringPolicy)
    app: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        run = d.get("run", {})
        try:
            stores = {s["store_id"]: StoreConfig.from_dict(s) for s in d.get("stores", [])}
            endpoints = {e["endpoint_id"]: EndpointConfig.from_dict(e) for e in d.get("endpoints", [])}
            topics = {
                name: TopicSpec(name, t["function"], t["endpoint"], {k: str(v) for k, v in t.get("params", {}).items()},
                                t.get("resource", "cpu"))
                for name, t in d.get("topics", {}).items()
            }
            cfg = cls(
                raw=d,
                time_scale=float(run.get("time_scale", 1 / 30)),
                data_scale=float(run.get("data_scale", 1 / 100)),
                seed=int(run.get("seed", 0)),
                relay=RelayConfig.from_dict(d.get("relay")),
                stores=stores,
                sites={name: list(s.get("stores", [])) for name, s in d.get("sites", {}).items()},
                endpoints=endpoints,
                topics=topics,
                proxy=ProxyPolicy.from_dict(d.get("proxy", {})),
                policy=SteeringPolicy.from_dict(d.get("policy")),
                app=d.get("app", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed config: {exc!r}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.raw, indent=2))

    # -- derived views -----------------------------------------------------------
    def site_stores(self, site: str) -> dict[str, StoreConfig]:
        return {sid: self.stores[sid] for sid in self.sites.get(site, [])}

    def shared_fs_sites(self, site: str) -> frozenset[str]:
        mine = {sid for sid in self.sites.get(site, []) if self.stores[sid].kind is StoreKind.FILESYSTEM}
        return frozenset(
            other for other, ids in self.sites.items() if other != site and mine.intersection(ids)
        )

    def endpoint_spec(self, endpoint_id: str, token: str = "") -> EndpointSpec:
        e = self.endpoints[endpoint_id]
        if not token and e.token_path:
            token = Path(e.token_path).read_text().strip()
        return EndpointSpec(
            endpoint_id=e.endpoint_id,
            site_name=e.site,
            resource_kind=e.resource_kind,
            worker_slots=e.worker_slots,
            store_bindings=self.site_stores(e.site),
            shared_fs_sites=self.shared_fs_sites(e.site),
            pairing_token=token,
            result_policy=self.proxy,
            cache_bytes=e.cache_bytes,
        )

    def slots(self, kind: str) -> int:
        return sum(e.worker_slots for e in self.endpoints.values() if e.resource_kind == kind)

    # -- validation -----------------------------------------------------------------
    def validate(self, implementations: dict | None = None) -> list[str]:
        """Every inconsistency found, as messages; empty when the config is sound."""
        problems = []
        for site, ids in self.sites.items():
            for sid in ids:
                if sid not in self.stores:
                    problems.append(f"site {site} binds unknown store {sid}")
        for e in self.endpoints.values():
            if e.site not in self.sites:
                problems.append(f"endpoint {e.endpoint_id} is at unknown site {e.site}")
            if e.worker_slots < 1:
                problems.append(f"endpoint {e.endpoint_id} has no worker slots")
        for t in self.topics.values():
            ep = self.endpoints.get(t.endpoint_id)
            if ep is None:
                problems.append(f"topic {t.name} routes to unknown endpoint {t.endpoint_id}")
                continue
            resource = t.resource
            if implementations is not None:
                impl = implementations.get(t.function)
                if impl is None:
                    problems.append(f"topic {t.name}: no implementation named {t.function}")
                    continue
                resource = impl.resource
            if resource != ep.resource_kind:
                problems.append(
                    f"topic {t.name} needs {resource} but routes to {ep.resource_kind} endpoint {ep.endpoint_id}"
                )
            rule = self.proxy.rule_for(t.name)
            if rule.store_id:
                for site in (THINKER_SITE, ep.site):
                    if rule.store_id not in self.sites.get(site, []):
                        problems.append(f"topic {t.name} proxies into {rule.store_id}, not bound at site {site}")
        return problems

    def check(self, implementations: dict | None = None) -> "RunConfig":
        problems = self.validate(implementations)
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def assign_ports(raw: dict) -> dict:
    """Copy of ``raw`` with every zero/missing port replaced by a free one."""
    raw = copy.deepcopy(raw)
    relay = raw.setdefault("relay", {})
    if not relay.get("port"):
        relay["port"] = free_port()
    for s in raw.get("stores", []):
        if s.get("kind") != StoreKind.FILESYSTEM.value and not s.get("port"):
            s["port"] = free_port()
    return raw
