"""Block/group partitioning, pair plans and residency management.

Images are split into blocks of ``N_p`` and blocks into groups of ``M``.
Groups live in host memory and blocks on the (modelled) device; at most
three units of each kind are resident while matching and two while
hashing. A plan is an ordered list of tasks, each task a block pair whose
image pairs are matched together. :py:func:`step_residency` advances the
two-line state machine over a plan: line one loads what the current task
lacks and runs it, line two prefetches what the following tasks will need.
"""
import logging
from bisect import bisect_right
from collections import Counter, namedtuple
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait

from cashash.util import PlanError, ResidencyError, pair_key

log = logging.getLogger(__name__)

HASHING = "hashing"
EXHAUSTIVE = "exhaustive"
GUIDED = "guided"

MEMORY = "memory"
DEVICE = "device"
LEVELS = (MEMORY, DEVICE)

RESIDENCY_LIMITS = {HASHING: 2, EXHAUSTIVE: 3, GUIDED: 3}

Task = namedtuple("Task", ["group_pair", "block_pair", "image_pairs"])
Action = namedtuple("Action", ["kind", "level", "unit"])


class Partition(object):
    """Contiguous split of ``count`` images. ``blocks`` holds the image
    indices of each block; block ids are global, so group ``g`` owns blocks
    ``g * M`` to ``g * M + M - 1``."""

    def __init__(self, count, block_images, blocks_per_group):
        self.count = count
        self.block_images = block_images
        self.blocks_per_group = blocks_per_group
        self.blocks = [
            list(range(start, min(start + block_images, count)))
            for start in range(0, count, block_images)
        ]
        self.group_blocks = [
            list(range(start, min(start + blocks_per_group, len(self.blocks))))
            for start in range(0, len(self.blocks), blocks_per_group)
        ]

    @property
    def groups(self):
        """Nested image indices: group -> block -> image."""
        return [[self.blocks[b] for b in blocks] for blocks in self.group_blocks]

    def group_of(self, block):
        return block // self.blocks_per_group

    def block_of(self, image):
        return image // self.block_images

    def images_of_group(self, group):
        return [i for b in self.group_blocks[group] for i in self.blocks[b]]

    def __len__(self):
        return len(self.group_blocks)

    def __repr__(self):
        return "<Partition(%d images, %d blocks, %d groups)>" % (
            self.count, len(self.blocks), len(self.group_blocks))


def partition(manifest, block_images, blocks_per_group):
    """Partition a manifest (or an image count)."""
    if block_images < 1 or blocks_per_group < 1:
        raise PlanError(
            "block_images and blocks_per_group must be >= 1: %r, %r"
            % (block_images, blocks_per_group)
        )
    count = manifest if isinstance(manifest, int) else len(manifest)
    if count < 1:
        raise PlanError("empty manifest")
    return Partition(count, block_images, blocks_per_group)


class PairPlan(object):
    def __init__(self, mode, tasks, partition):
        self.mode = mode
        self.tasks = list(tasks)
        self.partition = partition

    @property
    def image_pairs(self):
        return [p for task in self.tasks for p in task.image_pairs]

    def dump(self):
        """Task list as text, one task per line."""
        lines = []
        for num, task in enumerate(self.tasks):
            i, k = task.group_pair
            j, l = task.block_pair
            if self.mode == HASHING:
                images = " ".join(str(a) for a in self.partition.blocks[j])
                lines.append("%d\tgroup %d\tblock %d\timages %s" % (num, i, j, images))
            else:
                pairs = " ".join("%d-%d" % p for p in task.image_pairs)
                lines.append(
                    "%d\tgroups %d,%d\tblocks %d,%d\tpairs %s" % (num, i, k, j, l, pairs)
                )
        return "\n".join(lines)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __repr__(self):
        return "<PairPlan(%s, %d tasks)>" % (self.mode, len(self.tasks))


def _block_task(part, a, b):
    ga, gb = part.group_of(a), part.group_of(b)
    if a == b:
        images = part.blocks[a]
        pairs = [(x, y) for n, x in enumerate(images) for y in images[n + 1:]]
    else:
        pairs = sorted(pair_key(x, y) for x in part.blocks[a] for y in part.blocks[b])
    return Task((ga, gb), (a, b), pairs)


def _lead_with(order, previous):
    """Rotate ``order`` to start at a block of the previous task."""
    if previous is None:
        return list(order)
    for pos, block in enumerate(order):
        if block in previous.block_pair:
            return order[pos:] + order[:pos]
    return list(order)


def plan_exhaustive(part):
    """Every unordered image pair exactly once.

    For each anchor group: the block pairs inside it, then the self pairs of
    its blocks, then its block pairs with each later group from the last
    group backwards. Any two successive tasks touch at most three blocks
    and three groups between them, so three resident units at each level
    are enough to prefetch the next task while the current one runs.
    """
    tasks = []

    def emit(a, b):
        task = _block_task(part, a, b)
        if task.image_pairs:
            tasks.append(task)

    for i, anchor in enumerate(part.group_blocks):
        previous = tasks[-1] if tasks else None
        order = _lead_with(anchor, previous)
        for row in range(len(order) - 1):
            rest = order[row + 1:]
            if row % 2:
                rest = rest[::-1]
            for other in rest:
                emit(order[row], other)
        for block in order[::-1]:
            emit(block, block)
        previous = tasks[-1] if tasks else None
        anchors = _lead_with(anchor, previous)
        forward = True
        for k in range(len(part.group_blocks) - 1, i, -1):
            others = part.group_blocks[k]
            for j in anchors:
                for l in others if forward else others[::-1]:
                    emit(j, l)
                forward = not forward
            anchors = anchors[::-1]
    return PairPlan(EXHAUSTIVE, tasks, part)


def plan_guided(part, accepted_pairs):
    """The exhaustive traversal restricted to ``accepted_pairs``."""
    accepted = set()
    for a, b in accepted_pairs:
        if not (0 <= a < part.count and 0 <= b < part.count) or a == b:
            raise PlanError("Pair (%r, %r) references an unknown image" % (a, b))
        accepted.add(pair_key(a, b))
    tasks = []
    for task in plan_exhaustive(part).tasks:
        pairs = [p for p in task.image_pairs if p in accepted]
        if pairs:
            tasks.append(Task(task.group_pair, task.block_pair, pairs))
    return PairPlan(GUIDED, tasks, part)


def plan_hashing(part):
    """One task per block, in block order."""
    tasks = [
        Task((part.group_of(b), part.group_of(b)), (b, b), [])
        for b in range(len(part.blocks))
    ]
    return PairPlan(HASHING, tasks, part)


def task_units(part, task, level):
    if level == DEVICE:
        return set(task.block_pair)
    return set(task.group_pair)


class ResidencyState(object):
    """Residency of groups (memory) and blocks (device) while walking a
    plan. ``position`` is the next task to begin and ``running`` the tasks
    begun but not finished. Units read by a running task are pinned and
    never evicted."""

    def __init__(self, plan, limit=None):
        self.plan = plan
        self.limit = limit or RESIDENCY_LIMITS[plan.mode]
        self.position = 0
        self.running = []
        self.resident = {MEMORY: [], DEVICE: []}
        self.pinned = {MEMORY: Counter(), DEVICE: Counter()}
        self.prefetched = {MEMORY: set(), DEVICE: set()}
        self._units = {}
        self._uses = {}
        for level in LEVELS:
            self._units[level] = [
                tuple(sorted(task_units(plan.partition, task, level))) for task in plan.tasks
            ]
            uses = {}
            for num, units in enumerate(self._units[level]):
                for unit in units:
                    uses.setdefault(unit, []).append(num)
            self._uses[level] = uses

    @property
    def in_progress(self):
        return {level: set(self.pinned[level]) for level in LEVELS}

    @property
    def in_progress_limit(self):
        return max(self.limit - 1, 1)

    def units(self, level, num):
        return self._units[level][num]

    def next_use(self, level, unit, after):
        uses = self._uses[level].get(unit, ())
        pos = bisect_right(uses, after)
        return uses[pos] if pos < len(uses) else float("inf")

    @property
    def done(self):
        return not self.running and self.position >= len(self.plan.tasks)

    def check(self):
        for level in LEVELS:
            pinned = set(self.pinned[level])
            if len(self.resident[level]) > self.limit:
                raise ResidencyError("%d %s units resident, limit %d"
                                     % (len(self.resident[level]), level, self.limit))
            if len(pinned) > self.in_progress_limit:
                raise ResidencyError("%d %s units in progress" % (len(pinned), level))
            if not pinned <= set(self.resident[level]):
                raise ResidencyError("In-progress %s unit is not resident" % level)

    def _victim(self, level, protect, horizon):
        """Resident unit used farthest in the future, among those not
        protected; None unless its next use is later than ``horizon``."""
        best, best_use = None, horizon
        for unit in self.resident[level]:
            if unit in protect or unit in self.pinned[level]:
                continue
            use = self.next_use(level, unit, self.position)
            if use > best_use:
                best, best_use = unit, use
        return best

    def _admit(self, level, unit, kind, protect, horizon, actions):
        if len(self.resident[level]) >= self.limit:
            victim = self._victim(level, protect, horizon)
            if victim is None:
                return False
            self.resident[level].remove(victim)
            self.prefetched[level].discard(victim)
            actions.append(Action("evict", level, victim))
        self.resident[level].append(unit)
        if kind == "prefetch":
            self.prefetched[level].add(unit)
        actions.append(Action(kind, level, unit))
        return True

    def _ensure(self, level, units, actions):
        for unit in sorted(units):
            if unit in self.resident[level]:
                self.prefetched[level].discard(unit)
                continue
            if not self._admit(level, unit, "load", units, -1, actions):
                raise ResidencyError("No evictable %s slot for unit %r" % (level, unit))
        self.pinned[level].update(units)

    def _prefetch(self, level, actions):
        part = self.plan.partition
        wanted = []
        num = self.position + 1
        # The next `limit` distinct units are all a full cache could hold.
        while num < len(self.plan.tasks) and len(wanted) < self.limit:
            for unit in self._units[level][num]:
                if unit not in wanted:
                    wanted.append(unit)
            num += 1
        for unit in wanted:
            if unit in self.resident[level]:
                continue
            if level == DEVICE and part.group_of(unit) not in self.resident[MEMORY]:
                break
            horizon = self.next_use(level, unit, self.position)
            if not self._admit(level, unit, "prefetch", (), horizon, actions):
                break

    def can_begin(self):
        """Whether the next task fits beside the running ones: its units and
        the pinned ones within the in-progress limit, and enough unpinned
        slots for whatever it still has to load."""
        if self.position >= len(self.plan.tasks):
            return False
        for level in LEVELS:
            units = set(self._units[level][self.position])
            pinned = set(self.pinned[level])
            if len(pinned | units) > self.in_progress_limit:
                return False
            missing = [u for u in units if u not in self.resident[level]]
            spare = [u for u in self.resident[level] if u not in pinned and u not in units]
            if len(missing) > self.limit - len(self.resident[level]) + len(spare):
                return False
        return True

    def begin(self):
        """Begin the next task. Emits, in order: loads of missing groups,
        group prefetches, loads of missing blocks, ``begin``, block
        prefetches. Returns None when the task must wait for a running one
        to finish."""
        if not self.can_begin():
            if self.running or self.position >= len(self.plan.tasks):
                return None
            raise ResidencyError("Task %d does not fit in %d slots" % (self.position, self.limit))
        part = self.plan.partition
        task = self.plan.tasks[self.position]
        actions = []
        self._ensure(MEMORY, task_units(part, task, MEMORY), actions)
        self._prefetch(MEMORY, actions)
        self._ensure(DEVICE, task_units(part, task, DEVICE), actions)
        actions.append(Action("begin", None, self.position))
        self._prefetch(DEVICE, actions)
        self.running.append(self.position)
        self.position += 1
        self.check()
        return actions

    def finish(self, num):
        if num not in self.running:
            raise ResidencyError("Task %r is not running" % num)
        self.running.remove(num)
        for level in LEVELS:
            self.pinned[level] -= Counter(self._units[level][num])
        return [Action("finish", None, num)]

    def __repr__(self):
        return "<ResidencyState(task %d, memory %r, device %r)>" % (
            self.position, self.resident[MEMORY], self.resident[DEVICE])


def step_residency(state, plan=None):
    """Advance ``state`` by one transition and return ``(state, actions)``.

    Transitions alternate: begin the next task, then finish it. Loads only
    appear when a prefetch could not cover a task.
    """
    if plan is not None and plan is not state.plan:
        raise ResidencyError("State belongs to a different plan")
    if state.running:
        return state, state.finish(state.running[0])
    if state.done:
        return state, []
    return state, state.begin()


class SimulationTrace(object):
    def __init__(self):
        self.actions = []
        self.peak = {MEMORY: 0, DEVICE: 0}
        self.stalls = 0
        self.begun = False

    def record(self, state, actions):
        for action in actions:
            if action.kind == "load" and self.begun:
                self.stalls += 1
            if action.kind == "begin":
                self.begun = True
        self.actions.extend(actions)
        for level in LEVELS:
            self.peak[level] = max(self.peak[level], len(state.resident[level]))

    def kinds(self):
        return [a.kind for a in self.actions]


def simulate(plan, limit=None):
    """Run the residency state machine over ``plan`` with unit load costs.
    A stall is a load issued after the first task began."""
    state = ResidencyState(plan, limit=limit)
    trace = SimulationTrace()
    while not state.done:
        state, actions = step_residency(state)
        trace.record(state, actions)
    return trace


def assign_workers(plan, workers):
    """Round-robin the plan's tasks over ``workers`` lanes; returns one
    sub-plan per lane."""
    if workers < 1:
        raise PlanError("workers must be >= 1: %r" % workers)
    lanes = [[] for _ in range(workers)]
    for num, task in enumerate(plan.tasks):
        lanes[num % workers].append(task)
    return [PairPlan(plan.mode, tasks, plan.partition) for tasks in lanes]


def split_task(task, workers):
    """Round-robin a task's image pairs over ``workers`` slices that all
    read the task's blocks. Empty slices are dropped."""
    if workers < 1:
        raise PlanError("workers must be >= 1: %r" % workers)
    if workers == 1 or len(task.image_pairs) < 2:
        return [task]
    slices = [task.image_pairs[lane::workers] for lane in range(workers)]
    return [Task(task.group_pair, task.block_pair, pairs) for pairs in slices if pairs]


class Coordinator(object):
    """Runs a plan against one shared :py:class:`ResidencyState`.

    ``load_group(images)`` builds the in-memory form of a group and
    ``load_block(images, group_data)`` the device form of a block; both run
    on the loader lane. Tasks begin in plan order, at most ``workers`` at a
    time, and each begun task is split over the compute lanes:
    ``work(task_slice, blocks)`` gets ``blocks`` mapping block id to its
    device form. A unit is evicted only once no running task reads it.
    """

    def __init__(self, plan, load_group, load_block, workers=1):
        if workers < 1:
            raise PlanError("workers must be >= 1: %r" % workers)
        self.plan = plan
        self.load_group = load_group
        self.load_block = load_block
        self.workers = workers
        self.trace = SimulationTrace()
        self.peak = {MEMORY: 0, DEVICE: 0}

    @property
    def stalls(self):
        return self.trace.stalls

    def _device_load(self, images, group_future):
        return self.load_block(images, group_future.result())

    def _apply(self, actions, loader, stores):
        part = self.plan.partition
        for action in actions:
            if action.kind == "evict":
                stores[action.level].pop(action.unit)
            elif action.kind in ("load", "prefetch"):
                if action.level == MEMORY:
                    images = part.images_of_group(action.unit)
                    stores[MEMORY][action.unit] = loader.submit(self.load_group, images)
                else:
                    group = stores[MEMORY][part.group_of(action.unit)]
                    stores[DEVICE][action.unit] = loader.submit(
                        self._device_load, part.blocks[action.unit], group
                    )
        for level in LEVELS:
            self.peak[level] = max(self.peak[level], len(stores[level]))

    def _finish_some(self, state, running, results):
        pending = [f for futures in running.values() for f in futures]
        wait(pending, return_when=FIRST_COMPLETED)
        for num in sorted(running):
            if all(f.done() for f in running[num]):
                results[num] = [f.result() for f in running.pop(num)]
                self.trace.record(state, state.finish(num))

    def run(self, work):
        """Execute every task; returns, per task in plan order, the results
        of its slices."""
        log.info("Running %r on %d lanes", self.plan, self.workers)
        state = ResidencyState(self.plan)
        stores = {MEMORY: {}, DEVICE: {}}
        running = {}
        results = [None] * len(self.plan.tasks)
        with ThreadPoolExecutor(max_workers=1, thread_name_prefix="loader") as loader:
            with ThreadPoolExecutor(max_workers=self.workers,
                                    thread_name_prefix="compute") as pool:
                while not state.done:
                    actions = state.begin() if len(running) < self.workers else None
                    if actions is None:
                        self._finish_some(state, running, results)
                        continue
                    self.trace.record(state, actions)
                    self._apply(actions, loader, stores)
                    num = [a.unit for a in actions if a.kind == "begin"][0]
                    task = self.plan.tasks[num]
                    blocks = {b: stores[DEVICE][b].result() for b in set(task.block_pair)}
                    running[num] = [pool.submit(work, piece, blocks)
                                    for piece in split_task(task, self.workers)]
        if self.stalls:
            log.debug("%d loads were not covered by a prefetch", self.stalls)
        return results
