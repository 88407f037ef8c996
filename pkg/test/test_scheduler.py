import threading
import unittest
from itertools import combinations

from cashash.types import DatasetManifest
from cashash.scheduler import partition, plan_exhaustive, plan_guided, plan_hashing
from cashash.scheduler import ResidencyState, step_residency, simulate, assign_workers
from cashash.scheduler import Coordinator, Action, Task, split_task, MEMORY, DEVICE, HASHING
from cashash.util import PlanError, ResidencyError

SIMULATED_COUNTS = list(range(1, 26)) + [37, 64]


def grid():
    for block_images in range(1, 6):
        for blocks_per_group in range(1, 5):
            yield block_images, blocks_per_group


class PartitionTestCase(unittest.TestCase):
    def test_ragged(self):
        part = partition(5, 2, 2)
        assert part.groups == [[[0, 1], [2, 3]], [[4]]], part.groups
        assert part.group_blocks == [[0, 1], [2]], part.group_blocks
        assert part.group_of(2) == 1
        assert part.block_of(3) == 1
        assert part.images_of_group(0) == [0, 1, 2, 3]

    def test_manifest(self):
        manifest = DatasetManifest([("a", "a"), ("b", "b"), ("c", "c")])
        part = partition(manifest, 1, 3)
        assert part.blocks == [[0], [1], [2]], part.blocks
        assert len(part) == 1

    def test_invalid(self):
        with self.assertRaises(PlanError):
            partition(DatasetManifest(), 2, 2)
        with self.assertRaises(PlanError):
            partition(4, 0, 2)
        with self.assertRaises(PlanError):
            partition(4, 2, 0)


class ExhaustivePlanTestCase(unittest.TestCase):
    def test_coverage(self):
        for count in range(1, 65):
            for block_images, blocks_per_group in grid():
                plan = plan_exhaustive(partition(count, block_images, blocks_per_group))
                pairs = plan.image_pairs
                assert len(pairs) == len(set(pairs)), (count, block_images, blocks_per_group)
                assert set(pairs) == set(combinations(range(count), 2)), count
                assert all(task.image_pairs for task in plan.tasks)

    def test_single_image(self):
        plan = plan_exhaustive(partition(1, 3, 2))
        assert len(plan) == 0
        assert plan.image_pairs == []

    def test_small_plan(self):
        plan = plan_exhaustive(partition(4, 2, 1))
        assert len(plan) == 3, plan.tasks
        assert len(plan.image_pairs) == 6
        assert plan.tasks[0].image_pairs == [(0, 1)]
        assert plan.tasks[1].image_pairs == [(0, 2), (0, 3), (1, 2), (1, 3)]
        assert plan.tasks[2].image_pairs == [(2, 3)]

    def test_order(self):
        plan = plan_exhaustive(partition(6, 1, 2))
        blocks = [task.block_pair for task in plan.tasks]
        assert blocks == [
            (0, 1), (0, 4), (0, 5), (1, 5), (1, 4), (1, 2), (1, 3), (0, 3), (0, 2),
            (2, 3), (2, 4), (2, 5), (3, 5), (3, 4), (4, 5),
        ], blocks

    def test_successive_tasks_fit_residency(self):
        for count in SIMULATED_COUNTS:
            for block_images, blocks_per_group in grid():
                plan = plan_exhaustive(partition(count, block_images, blocks_per_group))
                for a, b in zip(plan.tasks, plan.tasks[1:]):
                    assert len(set(a.block_pair) | set(b.block_pair)) <= 3, (a, b)
                    assert len(set(a.group_pair) | set(b.group_pair)) <= 3, (a, b)

    def test_dump(self):
        lines = plan_exhaustive(partition(4, 2, 1)).dump().splitlines()
        assert lines[0] == "0\tgroups 0,0\tblocks 0,0\tpairs 0-1", lines[0]
        assert lines[1] == "1\tgroups 0,1\tblocks 0,1\tpairs 0-2 0-3 1-2 1-3", lines[1]


class GuidedPlanTestCase(unittest.TestCase):
    def test_subset(self):
        part = partition(9, 2, 2)
        accepted = [(0, 5), (7, 3), (1, 2), (6, 8)]
        plan = plan_guided(part, accepted)
        assert sorted(plan.image_pairs) == [(0, 5), (1, 2), (3, 7), (6, 8)]
        full = plan_exhaustive(part).image_pairs
        assert plan.image_pairs == [p for p in full if p in set(plan.image_pairs)]

    def test_empty(self):
        assert len(plan_guided(partition(5, 2, 2), [])) == 0

    def test_unknown_image(self):
        with self.assertRaises(PlanError):
            plan_guided(partition(5, 2, 2), [(0, 5)])
        with self.assertRaises(PlanError):
            plan_guided(partition(5, 2, 2), [(2, 2)])


class HashingPlanTestCase(unittest.TestCase):
    def test_one_task_per_block(self):
        plan = plan_hashing(partition(7, 2, 2))
        assert [t.block_pair for t in plan.tasks] == [(0, 0), (1, 1), (2, 2), (3, 3)]
        assert [t.group_pair for t in plan.tasks] == [(0, 0), (0, 0), (1, 1), (1, 1)]
        assert plan.image_pairs == []
        assert plan.dump().splitlines()[3] == "3\tgroup 1\tblock 3\timages 6"

    def test_first_actions(self):
        trace = simulate(plan_hashing(partition(6, 1, 2)))
        assert trace.actions[:2] == [Action("load", MEMORY, 0), Action("prefetch", MEMORY, 1)]
        assert trace.actions[2] == Action("load", DEVICE, 0), trace.actions[:5]
        assert trace.actions[3] == Action("begin", None, 0), trace.actions[:5]


class ResidencyTestCase(unittest.TestCase):
    def test_exhaustive_never_stalls(self):
        for count in SIMULATED_COUNTS:
            for block_images, blocks_per_group in grid():
                plan = plan_exhaustive(partition(count, block_images, blocks_per_group))
                trace = simulate(plan)
                key = (count, block_images, blocks_per_group)
                assert trace.stalls == 0, key
                assert trace.peak[MEMORY] <= 3, key
                assert trace.peak[DEVICE] <= 3, key
                assert trace.kinds().count("begin") == len(plan), key

    def test_hashing_never_stalls(self):
        for count in SIMULATED_COUNTS:
            for block_images, blocks_per_group in grid():
                trace = simulate(plan_hashing(partition(count, block_images, blocks_per_group)))
                assert trace.stalls == 0, count
                assert trace.peak[MEMORY] <= 2, count
                assert trace.peak[DEVICE] <= 2, count

    def test_guided_within_limits(self):
        part = partition(20, 2, 2)
        accepted = [p for p in combinations(range(20), 2) if (p[0] * 7 + p[1]) % 3 == 0]
        trace = simulate(plan_guided(part, accepted))
        assert trace.peak[MEMORY] <= 3
        assert trace.peak[DEVICE] <= 3

    def test_last_task_has_no_prefetch(self):
        plan = plan_exhaustive(partition(12, 2, 2))
        state = ResidencyState(plan)
        last = []
        while not state.done:
            state, actions = step_residency(state)
            if any(a.kind == "begin" for a in actions):
                last = actions
        assert last[-1] == Action("begin", None, len(plan) - 1), last
        assert not [a for a in last if a.kind == "prefetch"], last

    def test_transition_order(self):
        plan = plan_exhaustive(partition(8, 2, 1))
        assert [t.block_pair for t in plan.tasks[:3]] == [(0, 0), (0, 3), (0, 2)]
        state = ResidencyState(plan)
        state, actions = step_residency(state)
        assert actions == [
            Action("load", MEMORY, 0),
            Action("prefetch", MEMORY, 3),
            Action("prefetch", MEMORY, 2),
            Action("load", DEVICE, 0),
            Action("begin", None, 0),
            Action("prefetch", DEVICE, 3),
            Action("prefetch", DEVICE, 2),
        ], actions
        state, actions = step_residency(state)
        assert actions == [Action("finish", None, 0)], actions
        assert state.position == 1

    def test_foreign_plan(self):
        plan = plan_hashing(partition(4, 1, 1))
        state = ResidencyState(plan)
        with self.assertRaises(ResidencyError):
            step_residency(state, plan_hashing(partition(4, 1, 1)))

    def test_tight_limit_is_enforced(self):
        plan = plan_exhaustive(partition(6, 1, 1))
        with self.assertRaises(ResidencyError):
            simulate(plan, limit=1)


class WorkersTestCase(unittest.TestCase):
    def test_single_lane(self):
        plan = plan_exhaustive(partition(10, 2, 2))
        (lane,) = assign_workers(plan, 1)
        assert lane.tasks == plan.tasks

    def test_round_robin(self):
        plan = plan_exhaustive(partition(10, 2, 2))
        lanes = assign_workers(plan, 3)
        assert lanes[1].tasks == plan.tasks[1::3]
        assert sum(len(lane) for lane in lanes) == len(plan)

    def test_more_lanes_than_tasks(self):
        plan = plan_exhaustive(partition(4, 2, 1))
        lanes = assign_workers(plan, 8)
        assert [len(lane) for lane in lanes] == [1, 1, 1, 0, 0, 0, 0, 0]

    def test_invalid(self):
        with self.assertRaises(PlanError):
            assign_workers(plan_hashing(partition(3, 1, 1)), 0)


class CoordinatorTestCase(unittest.TestCase):
    def run_plan(self, plan, workers):
        part = plan.partition
        threads = set()
        lock = threading.Lock()

        def load_group(images):
            with lock:
                threads.add(threading.current_thread().name)
            return {index: "image %d" % index for index in images}

        def load_block(images, group):
            return [group[index] for index in images]

        def work(task, blocks):
            for block in task.block_pair:
                expected = ["image %d" % index for index in part.blocks[block]]
                assert blocks[block] == expected, (block, blocks[block])
            return task.block_pair, list(task.image_pairs)

        coordinator = Coordinator(plan, load_group, load_block, workers)
        return coordinator.run(work), coordinator, threads

    def test_results_in_plan_order(self):
        plan = plan_exhaustive(partition(11, 2, 2))
        for workers in (1, 2, 3, 8):
            results, _, _ = self.run_plan(plan, workers)
            assert len(results) == len(plan), workers
            for task, pieces in zip(plan.tasks, results):
                assert 1 <= len(pieces) <= workers, pieces
                assert all(block_pair == task.block_pair for block_pair, _ in pieces)
                pairs = sorted(p for _, chunk in pieces for p in chunk)
                assert pairs == sorted(task.image_pairs), (workers, task)

    def test_loads_on_loader_lane(self):
        plan = plan_exhaustive(partition(9, 2, 2))
        _, coordinator, threads = self.run_plan(plan, 1)
        assert all(name.startswith("loader") for name in threads), threads
        assert coordinator.stalls == 0

    def test_shared_residency_bound(self):
        plan = plan_exhaustive(partition(24, 2, 2))
        for workers in (2, 4):
            _, coordinator, _ = self.run_plan(plan, workers)
            assert coordinator.peak[MEMORY] <= 3, (workers, coordinator.peak)
            assert coordinator.peak[DEVICE] <= 3, (workers, coordinator.peak)
        _, coordinator, _ = self.run_plan(plan_hashing(partition(24, 2, 2)), 4)
        assert coordinator.peak[MEMORY] <= 2, coordinator.peak
        assert coordinator.peak[DEVICE] <= 2, coordinator.peak

    def test_hashing_plan(self):
        plan = plan_hashing(partition(7, 2, 2))
        assert plan.mode == HASHING
        results, _, _ = self.run_plan(plan, 2)
        assert results == [[((b, b), [])] for b in range(4)], results


class SplitTaskTestCase(unittest.TestCase):
    def test_round_robin_slices(self):
        task = plan_exhaustive(partition(4, 2, 1)).tasks[0]
        assert len(task.image_pairs) == 1
        assert split_task(task, 4) == [task]
        task = Task((0, 1), (0, 2), [(0, 4), (0, 5), (1, 4), (1, 5), (2, 4)])
        pieces = split_task(task, 2)
        assert [p.image_pairs for p in pieces] == [[(0, 4), (1, 4), (2, 4)],
                                                    [(0, 5), (1, 5)]], pieces
        assert all(p.block_pair == (0, 2) for p in pieces)
        assert len(split_task(task, 8)) == 5
        with self.assertRaises(PlanError):
            split_task(task, 0)

    def test_concurrent_tasks_share_state(self):
        plan = plan_exhaustive(partition(8, 2, 1))
        state = ResidencyState(plan)
        state.begin()
        second = state.begin()
        assert Action("begin", None, 1) in second, second
        assert not [a for a in second if a.kind == "load"], second
        assert state.running == [0, 1]
        assert state.in_progress[DEVICE] == {0, 3}
        assert state.begin() is None
        state.finish(0)
        assert state.begin() is None
        state.finish(1)
        third = state.begin()
        assert Action("begin", None, 2) in third, third
        state.check()
        with self.assertRaises(ResidencyError):
            state.finish(0)


if __name__ == "__main__":
    unittest.main()
