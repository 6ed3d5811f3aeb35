"""Tests for the toy-kernel forge and the rootkit sample injectors."""

import struct
from dataclasses import replace
from itertools import combinations

import pytest

from joker.arm_codec import NOP_WORD
from joker.errors import ForgeSpecError, InjectionError, SyscallIndexError
from joker.forge import (
    DEFAULT_SYSCALLS,
    LIST_POISON1,
    FixtureSpec,
    KernelModel,
    TaskSpec,
    build_clean_image,
    default_swi_template,
    load_fixture_spec,
)
from joker.mem_image import read_word32
from joker.samples import (
    SAMPLE4_FAKE_TABLE,
    apply_sample,
    diff_ranges,
    diff_words,
    hide_task,
    inject_evt_branch_hook,
    inject_halt_race,
    inject_swi_code_hook,
    inject_swi_pointer_hook,
    inject_syscall_hook,
)

TABLE_PHYS = 0x4003D224
SWI_PHYS = 0x4003D140
EVT_PHYS = 0x40002000
COPY_PHYS = 0x40300000
SAMPLE_PAIRS = [pair for pair in combinations("12345", 2) if pair != ("3", "4")]


class TestCleanKernel:
    """Test the layout of the default forged kernel."""

    def test_forge_is_deterministic(self, clean_kernel):
        """BEHAVIOR: The same spec always forges the same bytes."""
        assert build_clean_image() == clean_kernel

    def test_seed_changes_filler_only(self, clean_image):
        other, _ = build_clean_image(FixtureSpec(seed=7))

        changed = diff_words(clean_image, other)

        stubs = range(EVT_PHYS + 0x200, EVT_PHYS + 0x420)
        filler = range(SWI_PHYS + 0x70, SWI_PHYS + 0xD0)
        assert changed
        assert all(w in stubs or w in filler for w in changed)

    def test_vector_words(self, clean_image):
        words = struct.unpack("<8I", clean_image.read(EVT_PHYS, 32))

        assert words[:5] == (0xEF9F0000, 0xEA0000DD, 0xE59FF410, 0xEA0000BB, 0xEA00009A)
        assert read_word32(clean_image, EVT_PHYS + 0x420) == 0xC003D140
        assert read_word32(clean_image, EVT_PHYS + 0x424) == 0

    def test_syscall_table_follows_vector_swi(self, clean_image):
        words = struct.unpack("<32I", clean_image.read(TABLE_PHYS, 128))

        assert words == tuple(addr for _, addr in DEFAULT_SYSCALLS)

    def test_vector_swi_template(self, clean_image):
        assert read_word32(clean_image, SWI_PHYS + 0x48) == 0xE28F8094
        assert read_word32(clean_image, SWI_PHYS + 0xD0) == NOP_WORD
        assert read_word32(clean_image, SWI_PHYS + 0xE0) == 0xC0551C04
        assert len(default_swi_template()) == 57

    def test_roster_slots(self):
        model = KernelModel.from_spec(FixtureSpec())

        assert model.order == [0, 1, 3, 4, 6, 7]
        assert model.slot_phys(6) == 0x40200C00
        assert [t.comm for t in model.live_tasks()][-2:] == ["printer", "MalApp"]

    def test_stale_objects_carry_list_poison(self, clean_image, profile):
        """BEHAVIOR: Freed slots keep an old task_struct whose list links are poisoned."""
        stale = 0x40200000 + 2 * profile.task_struct_size

        assert read_word32(clean_image, stale + profile.task.tasks_next) == LIST_POISON1
        assert clean_image.read(stale + profile.task.comm, 9) == b"dumpstate"


class TestFixtureSpec:
    """Test FixtureSpec validation and the forge spec file."""

    def test_duplicate_pids(self):
        roster = FixtureSpec().roster + (TaskSpec(3129, "twin"),)

        with pytest.raises(ForgeSpecError, match="unique"):
            FixtureSpec(roster=roster).validate()

    def test_swapper_first(self):
        with pytest.raises(ForgeSpecError, match="swapper"):
            FixtureSpec(roster=(TaskSpec(1, "init"),)).validate()

    def test_comm_too_long(self):
        roster = FixtureSpec().roster + (TaskSpec(9000, "a_very_long_name_indeed"),)

        with pytest.raises(ForgeSpecError, match="comm_len"):
            FixtureSpec(roster=roster).validate()

    def test_template_without_table_load(self):
        """BEHAVIOR: A vector_swi template must contain exactly one add r8, pc."""
        with pytest.raises(ForgeSpecError, match="add r8"):
            FixtureSpec(swi_template=(NOP_WORD,) * 8).validate()

    def test_roster_exceeding_slab(self):
        roster = FixtureSpec().roster + (TaskSpec(4000, "extra"),)

        with pytest.raises(ForgeSpecError, match="slab slots"):
            KernelModel.from_spec(FixtureSpec(roster=roster))

    def test_spec_file(self):
        text = """
        # two-page kernel with a short roster
        [forge]
        seed = 3
        slab_pages = 2

        [roster]
        0 swapper 0 0
        1 init 1
        500 logger
        """

        spec = load_fixture_spec(text)

        assert spec.seed == 3
        assert spec.slab_pages == 2
        assert [t.comm for t in spec.roster] == ["swapper", "init", "logger"]
        assert spec.roster[2].flags == 0x00400100
        assert spec.stale == FixtureSpec().stale

    def test_spec_file_unknown_key(self):
        with pytest.raises(ForgeSpecError, match="unknown forge key"):
            load_fixture_spec("[forge]\ncolour = 1\n")

    def test_spec_file_bad_line(self):
        with pytest.raises(ForgeSpecError, match="line 2"):
            load_fixture_spec("[roster]\nswapper\n")


class TestKernelModel:
    """Test spawn and exit on the mutable kernel model."""

    def test_spawn_takes_first_free_slot(self):
        model = KernelModel.from_spec(FixtureSpec())

        slot = model.spawn(TaskSpec(4242, "logger"))

        assert slot == 2
        assert model.live_tasks()[-1].comm == "logger"

    def test_exit_frees_slot(self):
        model = KernelModel.from_spec(FixtureSpec())

        model.exit("printer")

        assert model.allocated[6] is False
        assert "printer" not in [t.comm for t in model.live_tasks()]

    def test_swapper_cannot_exit(self):
        model = KernelModel.from_spec(FixtureSpec())

        with pytest.raises(ForgeSpecError):
            model.exit("swapper")

    def test_duplicate_spawn(self):
        model = KernelModel.from_spec(FixtureSpec())

        with pytest.raises(ForgeSpecError, match="already running"):
            model.spawn(TaskSpec(3129, "printer"))


class TestSamples:
    """Test that each sample changes only what its technique touches."""

    def test_sample1_touches_four_table_words(self, clean_image, sample_images):
        changed = diff_words(clean_image, sample_images["1"])

        assert changed == {TABLE_PHYS + 4 * i for i in (3, 4, 5, 6)}
        assert read_word32(sample_images["1"], TABLE_PHYS + 12) == 0xBF034078

    def test_sample2_redirects_swi_vector(self, clean_image, sample_images):
        image = sample_images["2"]

        assert diff_words(clean_image, image) == {EVT_PHYS + 0x8, EVT_PHYS + 0x424}
        assert read_word32(image, EVT_PHYS + 0x8) == 0xE59FF414
        assert read_word32(image, EVT_PHYS + 0x424) == 0xBF035000

    def test_sample3_copies_handler(self, clean_image, sample_images, profile):
        """BEHAVIOR: The copied handler lands in a new segment and the pointer moves to it."""
        image = sample_images["3"]

        assert read_word32(image, EVT_PHYS + 0x420) == 0xC0300000
        assert image.read(0x40300000, profile.swi_handler_len) == clean_image.read(
            SWI_PHYS, profile.swi_handler_len
        )

    def test_sample4_rewrites_two_words(self, clean_image, sample_images):
        image = sample_images["4"]

        assert diff_words(clean_image, image) == {SWI_PHYS + 0x48, SWI_PHYS + 0xD0}
        assert read_word32(image, SWI_PHYS + 0x48) == 0xE59F8080
        assert read_word32(image, SWI_PHYS + 0xD0) == SAMPLE4_FAKE_TABLE

    def test_sample5_unlinks_printer(self, clean_image, sample_images, profile):
        image = sample_images["5"]
        node = profile.task.tasks_next

        changed = diff_words(clean_image, image)

        # system_server.next and MalApp.prev now skip slot 6
        assert changed == {0x40200800 + node, 0x40200E00 + node + 4}

    def test_hiding_init_task_refused(self, clean_image, profile):
        with pytest.raises(InjectionError, match="init_task"):
            hide_task(clean_image, profile, "swapper")

    def test_unknown_victim(self, clean_image, profile):
        with pytest.raises(InjectionError, match="nobody"):
            hide_task(clean_image, profile, "nobody")

    def test_syscall_index_out_of_table(self, clean_image, profile):
        with pytest.raises(SyscallIndexError):
            inject_syscall_hook(clean_image, profile, [(32, 0xBF000000)])

    def test_evt_hook_with_custom_handler(self, clean_image, profile):
        image = inject_evt_branch_hook(clean_image, profile, 0xBF000000)

        assert read_word32(image, EVT_PHYS + 0x8) == 0xE59FF414
        assert read_word32(image, EVT_PHYS + 0x424) == 0xBF000000

    def test_swi_copy_outside_linear_map(self, clean_image, profile):
        """BEHAVIOR: A handler address below PAGE_OFFSET cannot host the copy."""
        with pytest.raises(InjectionError):
            inject_swi_pointer_hook(clean_image, profile, 0x80000000)

    def test_swi_code_hook_needs_table_load(self, sample_images, profile):
        """BEHAVIOR: A handler already rewritten has no add-pc load left to redirect."""
        with pytest.raises(InjectionError, match="add r8"):
            inject_swi_code_hook(sample_images["4"], profile, 0xC0000000)

    def test_unknown_sample(self, clean_image, profile):
        with pytest.raises(InjectionError, match="unknown sample"):
            apply_sample(clean_image, profile, "6")

    @pytest.mark.parametrize(
        "variant,offset,expected",
        [
            ("pid_zero", 0x150, b"\x00\x00\x00\x00"),
            ("negative_state", 0x0, b"\xff\xff\xff\xff"),
            ("shutdown_flags", 0xC, struct.pack("<I", 0x00400102)),
        ],
    )
    def test_halt_race_variants(self, clean_image, profile, variant, offset, expected):
        """BEHAVIOR: The victim is unlinked and carries exactly one transient marker."""
        image = inject_halt_race(clean_image, profile, "MalApp", variant=variant)

        assert image.read(0x40200E00 + offset, 4) == expected
        assert image.read(0x40200E00 + profile.task.comm, 6) == b"MalApp"

    def test_unknown_race_variant(self, clean_image, profile):
        with pytest.raises(InjectionError, match="variant"):
            inject_halt_race(clean_image, profile, "MalApp", variant="zombie")


class TestComposability:
    """Test that samples with disjoint footprints can be stacked in either order."""

    @pytest.mark.parametrize("first,second", SAMPLE_PAIRS)
    def test_pair_commutes(self, clean_image, profile, first, second):
        # ACT
        forward = apply_sample(apply_sample(clean_image, profile, first), profile, second)
        backward = apply_sample(apply_sample(clean_image, profile, second), profile, first)

        # ASSERT
        assert diff_ranges(forward, backward) == []

    def test_handler_copy_records_code_hook_order(self, sample_images, profile):
        """BEHAVIOR: Sample 3 copies vector_swi as it stands, so a prior code hook rides along."""
        code_hook_first = apply_sample(sample_images["4"], profile, "3")
        copy_first = apply_sample(sample_images["3"], profile, "4")

        assert diff_words(code_hook_first, copy_first) == {COPY_PHYS + 0x48, COPY_PHYS + 0xD0}
        assert read_word32(code_hook_first, COPY_PHYS + 0x48) == 0xE59F8080
        assert read_word32(copy_first, COPY_PHYS + 0x48) == 0xE28F8094
        assert read_word32(copy_first, COPY_PHYS + 0xD0) == NOP_WORD


class TestDiffRanges:
    """Test the byte-diff oracle."""

    def test_identical_images(self, clean_image):
        assert diff_ranges(clean_image, clean_image) == []

    def test_adjacent_bytes_merge(self, clean_image):
        changed = clean_image.patched(TABLE_PHYS + 1, b"\xaa\xbb\xcc")

        assert diff_ranges(clean_image, changed) == [(TABLE_PHYS + 1, 3)]

    def test_one_sided_segment(self, clean_image):
        """BEHAVIOR: Bytes mapped on only one side count as differences."""
        extra = clean_image.with_segment(0x50000000, b"\x00" * 8)

        assert diff_ranges(clean_image, extra) == [(0x50000000, 8)]
        assert diff_ranges(extra, clean_image) == [(0x50000000, 8)]

    def test_seed_replacement_keeps_layout(self):
        spec = replace(FixtureSpec(), seed=11)

        image, profile = build_clean_image(spec)

        assert profile.sys_call_table_virt == 0xC003D224
        assert read_word32(image, TABLE_PHYS) == 0xC02D6800
