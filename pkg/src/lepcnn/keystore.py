"""On-device store of pre-computed key sets.

Layout under the store root::

    available/<request_id>.lepk   unclaimed key sets, one file each
    claimed/<request_id>.lepk     transient: claimed but not yet read back
    consumed.log                  append-only, one hex request id per line
    .lock                         serializes log appends and replenishment

A claim is an atomic rename out of ``available/``; of several concurrent
claimers exactly one rename succeeds.  The id is appended to the consumed
log (fsynced) before the key set is handed to the caller, so a crash can
lose a key set but never hand one out twice.
"""

import fcntl
import logging
import os
from contextlib import contextmanager
from pathlib import Path

from .errors import DuplicateKeyError, KeyExhausted, KeyIntegrityError
from .keyfile import build_batch, dump_keyset, load_keyset, peek_request_id, split_batch
from .tensor import ConvSpec

log = logging.getLogger(__name__)

# cost accounting: one 160-bit element occupies 20 bytes
ACCOUNTED_ELEMENT_BYTES = 20
SUFFIX = ".lepk"


def _fsync_dir(path):
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class KeyStore:
    def __init__(self, root):
        self.root = Path(root)
        self.available_dir = self.root / "available"
        self.claimed_dir = self.root / "claimed"
        self.log_path = self.root / "consumed.log"
        self.available_dir.mkdir(parents=True, exist_ok=True)
        self.claimed_dir.mkdir(exist_ok=True)
        self.log_path.touch(exist_ok=True)

    @contextmanager
    def _locked(self):
        with open(self.root / ".lock", "a+") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def _append_consumed(self, hex_id):
        with self._locked(), open(self.log_path, "a") as fh:
            fh.write(hex_id + "\n")
            fh.flush()
            os.fsync(fh.fileno())

    def recover(self):
        """Retire key sets left in ``claimed/`` by a crashed claimer.

        Only call this when no other process is claiming from the store.
        """
        retired = 0
        for path in self.claimed_dir.glob("*" + SUFFIX):
            hex_id = path.stem
            if hex_id not in self.consumed_ids():
                self._append_consumed(hex_id)
            path.unlink(missing_ok=True)
            log.warning("retired key set %s left behind by an interrupted claim", hex_id)
            retired += 1
        return retired

    # ------------------------------------------------------------ snapshots

    def available_ids(self):
        return sorted(p.stem for p in self.available_dir.glob("*" + SUFFIX))

    def consumed_ids(self):
        return set(self.log_path.read_text().split())

    def __len__(self):
        return len(self.available_ids())

    # ------------------------------------------------------------ claim

    def claim_keyset(self):
        """Atomically take one key set; raises KeyExhausted when none are left."""
        for hex_id in self.available_ids():
            src = self.available_dir / (hex_id + SUFFIX)
            dst = self.claimed_dir / (hex_id + SUFFIX)
            try:
                os.rename(src, dst)
            except FileNotFoundError:
                continue  # another claimer won this one
            _fsync_dir(self.available_dir)
            self._append_consumed(hex_id)
            try:
                data = dst.read_bytes()
            finally:
                dst.unlink(missing_ok=True)
            ks = load_keyset(data)
            if ks.hex_id != hex_id:
                raise KeyIntegrityError(f"key file {hex_id} holds request id {ks.hex_id}")
            ks.consumed = True
            return ks
        raise KeyExhausted(f"no key sets left in {self.root}")

    # ------------------------------------------------------------ replenish

    def add_keysets(self, keysets):
        return self.replenish(build_batch([dump_keyset(ks) for ks in keysets]))

    def replenish(self, batch):
        """Import a batch (bytes or path); returns the number of key sets added.

        The batch checksum and every key file are verified, and the whole
        batch is rejected if any request id is already known.
        """
        if isinstance(batch, (str, os.PathLike)):
            batch = Path(batch).read_bytes()
        files = split_batch(batch)
        entries = []
        for data in files:
            ks = load_keyset(data)  # full checksum + structure check
            entries.append((ks.hex_id, data))
        with self._locked():
            known = set(self.available_ids()) | self.consumed_ids()
            known |= {p.stem for p in self.claimed_dir.glob("*" + SUFFIX)}
            seen = set()
            for hex_id, _ in entries:
                if hex_id in known or hex_id in seen:
                    raise DuplicateKeyError(f"request id {hex_id} already present")
                seen.add(hex_id)
            for hex_id, data in entries:
                tmp = self.root / f".{hex_id}.tmp"
                with open(tmp, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.available_dir / (hex_id + SUFFIX))
            if entries:
                _fsync_dir(self.available_dir)
        return len(entries)

    def export_batch(self):
        """Snapshot of all available key files as one batch (they stay available)."""
        files = [(self.available_dir / (h + SUFFIX)).read_bytes() for h in self.available_ids()]
        return build_batch(files)


def batch_request_ids(batch):
    return [peek_request_id(f).hex() for f in split_batch(batch)]


def keyset_elements(net):
    """Key elements one request needs: Dn^2 + Ho^2 per conv, m + T per fc."""
    total = 0
    for i in net.linear_indices():
        layer = net.layers[i]
        if isinstance(layer, ConvSpec):
            total += layer.in_size + layer.out_size
        else:
            total += layer.m + layer.T
    return total


def capacity_report(net, budget_bytes, element_bytes=ACCOUNTED_ELEMENT_BYTES):
    """How many requests ``budget_bytes`` of key storage supports."""
    per_request = keyset_elements(net) * element_bytes
    return int(budget_bytes) // per_request


def capacity_range(net, gigabytes, element_bytes=ACCOUNTED_ELEMENT_BYTES):
    """Capacity for ``gigabytes`` read as 10**9 and as 2**30 bytes."""
    return (capacity_report(net, gigabytes * 10 ** 9, element_bytes),
            capacity_report(net, gigabytes * 2 ** 30, element_bytes))
