"""In-memory block device the integrity suites compare the engine against."""


class ShadowDevice:
    """
    Per-sector model of what a read may return.

    ``durable`` is what survives a crash; ``pending`` holds every version
    written since the sector was last covered by a flush barrier. A clean
    read returns the newest version; after a crash any pending version or the
    durable one is acceptable until a read pins it down.
    """

    def __init__(self, sector_size, sectors_per_page, logical_sectors):
        self.sector_size = sector_size
        self.sectors_per_page = sectors_per_page
        self.logical_sectors = logical_sectors
        self.zero = bytes(sector_size)
        self.latest = {}
        self.durable = {}
        self.pending = {}
        self.uncertain = {}

    def preload(self, lsn, data):
        """Data that is already on flash, e.g. synthesized by aging."""
        self.latest[lsn] = data
        self.durable[lsn] = data

    def write(self, lsn, data):
        # an unread crash survivor stays possible until the next barrier
        earlier = self.uncertain.pop(lsn, ())
        self.latest[lsn] = data
        self.pending.setdefault(lsn, list(earlier)).append(data)

    def read(self, lsn):
        return self.latest.get(lsn, self.zero)

    def flush(self, lpn=None):
        if lpn is None:
            lsns = list(self.pending)
        else:
            first = lpn * self.sectors_per_page
            lsns = [lsn for lsn in range(first, first + self.sectors_per_page) if lsn in self.pending]
        for lsn in lsns:
            self.durable[lsn] = self.latest[lsn]
            del self.pending[lsn]

    def crash(self):
        """Power loss: every sector written since its last barrier becomes uncertain."""
        for lsn, versions in self.pending.items():
            allowed = set(versions)
            allowed.add(self.durable.get(lsn, self.zero))
            self.uncertain[lsn] = allowed
        self.pending.clear()

    def allowed(self, lsn):
        if lsn in self.uncertain:
            return self.uncertain[lsn]
        return {self.read(lsn)}

    def reconcile(self, lsn, observed):
        """
        Check a read against the model and pin uncertain sectors to what was seen.

        param lsn: logical sector that was read.
        param observed: bytes returned by the engine.
        """
        if lsn not in self.uncertain:
            return observed == self.read(lsn)
        if observed not in self.uncertain[lsn]:
            return False
        del self.uncertain[lsn]
        self.latest[lsn] = observed
        self.durable[lsn] = observed
        return True

    def touched(self):
        return sorted(set(self.latest) | set(self.uncertain))
