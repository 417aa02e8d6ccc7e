"""Object-store backends and the per-site registry that binds them."""

from __future__ import annotations

import threading

from ..clock import WALL
from ..errors import StoreUnavailableError
from ..refcore import ObjectKey, Reference, ResolutionRecipe, StoreKind
from .local import FileSystemStore, InMemoryStore, WideAreaStore
from .model import (
    DEFAULT_MODELS,
    FILESYSTEM_MODEL,
    MEMORY_KV_MODEL,
    WIDE_AREA_MODEL,
    NetworkModel,
    Store,
    StoreConfig,
    StoreStats,
    TicketState,
    TransferTicket,
)
from .server import RemoteStore, StoreServer


def store_put(store: Store, key: ObjectKey, data: bytes) -> TransferTicket:
    return store.put(key, data)


def store_get(store: Store, key: ObjectKey) -> bytes:
    return store.get(key)


def store_stats(store: Store) -> StoreStats:
    return store.stats()


def build_backend(config: StoreConfig, clock=WALL) -> Store:
    """Construct the in-process engine a store server (or a test) runs."""
    if config.kind is StoreKind.MEMORY_KV:
        return InMemoryStore(config.store_id, config.network, config.capacity_bytes, clock)
    if config.kind is StoreKind.FILESYSTEM:
        if not config.root:
            raise ValueError(f"filesystem store {config.store_id} needs a root")
        return FileSystemStore(config.store_id, config.root, config.network, config.capacity_bytes, clock)
    if not config.staging_dir:
        raise ValueError(f"wide-area store {config.store_id} needs a staging_dir")
    return WideAreaStore(
        config.store_id,
        config.staging_dir,
        config.network,
        clock,
        config.capacity_bytes,
        config.failure_rate,
        config.max_retries,
    )


def connect(config: StoreConfig) -> Store:
    """Client handle for a configured store as seen from another process."""
    if config.kind is StoreKind.FILESYSTEM:
        return build_backend(config)
    return RemoteStore(config.store_id, config.kind, config.address)


def from_recipe(recipe: ResolutionRecipe) -> Store:
    if recipe.store_kind is StoreKind.FILESYSTEM:
        if not recipe.root:
            raise StoreUnavailableError(f"recipe for {recipe.store_id} has no root")
        return FileSystemStore(recipe.store_id, recipe.root)
    if not recipe.address or recipe.address == "inproc":
        raise StoreUnavailableError(f"store {recipe.store_id} is not reachable from this process")
    return RemoteStore(recipe.store_id, recipe.store_kind, recipe.address)


class StoreRegistry:
    """Stores reachable from one site.

    With ``permissive`` set, references to unbound stores are resolved by
    connecting through their recipe; otherwise they fail deterministically.
    """

    def __init__(self, stores: dict[str, Store] | None = None, permissive: bool = False):
        self._stores: dict[str, Store] = dict(stores or {})
        self.permissive = permissive
        self._lock = threading.Lock()

    def add(self, store: Store) -> Store:
        with self._lock:
            self._stores[store.store_id] = store
        return store

    def store(self, store_id: str) -> Store:
        with self._lock:
            try:
                return self._stores[store_id]
            except KeyError:
                raise StoreUnavailableError(f"store {store_id!r} is not bound at this site") from None

    def store_for(self, ref: Reference) -> Store:
        store_id = ref.object_key.store_id
        with self._lock:
            store = self._stores.get(store_id)
            if store is not None:
                return store
            if not self.permissive:
                raise StoreUnavailableError(f"store {store_id!r} is not bound at this site")
            store = self._stores[store_id] = from_recipe(ref.recipe)
            return store

    def __contains__(self, store_id: str) -> bool:
        return store_id in self._stores

    def ids(self) -> list[str]:
        return sorted(self._stores)

    def close(self) -> None:
        for s in list(self._stores.values()):
            s.close()


__all__ = [
    "DEFAULT_MODELS",
    "FILESYSTEM_MODEL",
    "MEMORY_KV_MODEL",
    "WIDE_AREA_MODEL",
    "FileSystemStore",
    "InMemoryStore",
    "NetworkModel",
    "RemoteStore",
    "Store",
    "StoreConfig",
    "StoreRegistry",
    "StoreServer",
    "StoreStats",
    "TicketState",
    "TransferTicket",
    "WideAreaStore",
    "build_backend",
    "connect",
    "from_recipe",
    "store_get",
    "store_put",
    "store_stats",
]
