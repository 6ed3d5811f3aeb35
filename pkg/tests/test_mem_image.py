"""Tests for physical memory images, the JKMI container and translation."""

import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from joker.errors import (
    ConfigurationError,
    ImageFormatError,
    ImageValidationError,
    NotLinearMappedError,
    TranslationFaultError,
    UnmappedAddressError,
)
from joker.mem_image import (
    MemoryImage,
    Segment,
    TranslationConstants,
    load_image,
    open_image,
    phys_to_virt_linear,
    read_bytes,
    read_word32,
    save_image,
    store_image,
    virt_to_phys_linear,
    walk_page_table,
)

TC = TranslationConstants(page_offset=0xC0000000, phys_offset=0x40000000, evt_phys=0x40002000)


class TestMemoryImage:
    """Test segment bookkeeping and reads."""

    def test_read_inside_one_segment(self):
        """BEHAVIOR: Bytes come back exactly as stored."""
        image = MemoryImage((Segment(0x1000, b"abcdef"),))

        assert image.read(0x1002, 3) == b"cde"

    def test_read_stitches_adjacent_segments(self):
        """BEHAVIOR: A read spanning two touching segments succeeds."""
        image = MemoryImage((Segment(0x2000, b"\x02" * 4), Segment(0x1FFC, b"\x01" * 4)))

        assert image.read(0x1FFE, 4) == b"\x01\x01\x02\x02"

    def test_read_reports_first_unmapped_byte(self):
        """BEHAVIOR: Gaps are errors naming the first missing address, never zero-filled."""
        image = MemoryImage((Segment(0x1000, b"\x00" * 0x10),))

        with pytest.raises(UnmappedAddressError) as exc:
            image.read(0x1008, 0x10)

        assert exc.value.address == 0x1010

    def test_overlapping_segments_rejected(self):
        """BEHAVIOR: Overlap is a validation error at construction."""
        with pytest.raises(ImageValidationError):
            MemoryImage((Segment(0x1000, b"\x00" * 0x20), Segment(0x1010, b"\x00")))

    def test_empty_segment_rejected(self):
        with pytest.raises(ImageValidationError):
            MemoryImage((Segment(0x1000, b""),))

    def test_patched_leaves_original_untouched(self):
        """BEHAVIOR: patched returns a new image; the input is immutable."""
        image = MemoryImage((Segment(0x1000, b"\x00" * 8, "text"),))

        changed = image.patched(0x1004, b"\xff\xff")

        assert image.read(0x1004, 2) == b"\x00\x00"
        assert changed.read(0x1004, 2) == b"\xff\xff"
        assert changed.segments[0].label == "text"

    def test_read_word32_is_little_endian(self):
        image = MemoryImage((Segment(0x0, struct.pack("<I", 0xE59FF410)),))

        assert read_word32(image, 0) == 0xE59FF410

    @given(data=st.binary(min_size=4, max_size=64), pick=st.integers(min_value=0))
    @settings(max_examples=50)
    def test_word_matches_assembled_bytes(self, data, pick):
        """BEHAVIOR: read_word32 is the little-endian assembly of read_bytes at any offset."""
        image = MemoryImage((Segment(0x40000000, data),))
        at = 0x40000000 + pick % (len(data) - 3)

        raw = read_bytes(image, at, 4)

        assert read_word32(image, at) == int.from_bytes(raw, "little")


class TestContainer:
    """Test the JKMI on-disk container."""

    def test_unlabelled_image_uses_version_1(self):
        image = MemoryImage((Segment(0x40000000, b"\x11" * 4),))

        blob = store_image(image)

        assert blob[:4] == b"JKMI"
        assert struct.unpack_from("<HH", blob, 4) == (1, 1)
        assert load_image(blob) == image

    def test_labels_survive_with_version_2(self):
        image = MemoryImage((Segment(0x10, b"\x01", "evt"), Segment(0x20, b"\x02", "")))

        blob = store_image(image)

        assert struct.unpack_from("<H", blob, 4)[0] == 2
        assert [s.label for s in load_image(blob).segments] == ["evt", ""]

    def test_bad_magic(self):
        with pytest.raises(ImageFormatError, match="magic"):
            load_image(b"ELF\x7f" + b"\x00" * 8)

    def test_label_must_be_utf8(self):
        """BEHAVIOR: An undecodable segment label is a format error."""
        blob = store_image(MemoryImage((Segment(0x10, b"\x01", "ev"),)))
        label_at = blob.index(b"ev")

        with pytest.raises(ImageFormatError, match="label"):
            load_image(blob[:label_at] + b"\xff\xfe" + blob[label_at + 2 :])

    def test_truncated_segment(self):
        blob = store_image(MemoryImage((Segment(0x0, b"\x00" * 16),)))

        with pytest.raises(ImageFormatError, match="truncated"):
            load_image(blob[:-1])

    def test_flat_blob_needs_base(self, tmp_path):
        """BEHAVIOR: A headerless dump loads only when a base is supplied."""
        path = tmp_path / "dump.bin"
        path.write_bytes(b"\xaa" * 32)

        with pytest.raises(ImageFormatError, match="--base"):
            open_image(path)
        assert open_image(path, base=0x40000000).read(0x40000010, 1) == b"\xaa"

    def test_save_then_open(self, tmp_path, clean_image):
        path = tmp_path / "clean.jkmi"

        save_image(clean_image, path)

        assert open_image(path) == clean_image

    @settings(max_examples=50)
    @given(
        st.lists(
            st.tuples(st.integers(1, 64), st.integers(0, 64), st.text(max_size=8)),
            min_size=1,
            max_size=6,
        )
    )
    def test_reload_preserves_every_byte(self, layout):
        """BEHAVIOR: load(store(img)) reads identically at every mapped byte."""
        segments, cursor = [], 0x1000
        for length, gap, label in layout:
            segments.append(Segment(cursor, bytes(range(length)), label))
            cursor += length + gap
        image = MemoryImage(tuple(segments))

        reloaded = load_image(store_image(image))

        for seg in image.segments:
            assert reloaded.read(seg.base, len(seg.data)) == seg.data


class TestTranslation:
    """Test linear translation and the short-descriptor walker."""

    def test_linear_translation(self):
        assert virt_to_phys_linear(TC, 0xC003D140) == 0x4003D140
        assert phys_to_virt_linear(TC, 0x4003D140) == 0xC003D140

    def test_below_page_offset(self):
        """BEHAVIOR: The EVT's high-vector address is not linear-mapped."""
        with pytest.raises(NotLinearMappedError):
            virt_to_phys_linear(TC, 0xBF034078)

    def test_invalid_evt_virt(self):
        with pytest.raises(ConfigurationError):
            TranslationConstants(0xC0000000, 0x40000000, 0x40002000, evt_virt=0xFFFF1000)

    def test_section_and_small_page(self):
        l1 = bytearray(0x4000)
        struct.pack_into("<I", l1, 0xC00 * 4, 0x80000000 | 0x40E)
        struct.pack_into("<I", l1, 0xFFF * 4, 0x00104001)
        l2 = bytearray(0x400)
        struct.pack_into("<I", l2, 0xF0 * 4, 0x40002000 | 0x3E)
        image = MemoryImage((Segment(0x100000, bytes(l1)), Segment(0x104000, bytes(l2))))

        assert walk_page_table(image, 0x100000, 0xC0012345) == 0x80012345
        assert walk_page_table(image, 0x100000, 0xFFFF0420) == 0x40002420

    def test_fault_descriptor(self):
        image = MemoryImage((Segment(0x0, bytes(0x4000)),))

        with pytest.raises(TranslationFaultError) as exc:
            walk_page_table(image, 0x0, 0xC0000000)

        assert exc.value.level == 1

    def test_supersection_unsupported(self):
        l1 = bytearray(0x4000)
        struct.pack_into("<I", l1, 0xC00 * 4, 0x80000000 | (1 << 18) | 0x2)
        image = MemoryImage((Segment(0x0, bytes(l1)),))

        with pytest.raises(TranslationFaultError, match="supersection"):
            walk_page_table(image, 0x0, 0xC0000000)

    def test_walk_matches_linear_map_of_forged_kernel(self, clean_image, profile):
        """BEHAVIOR: Every linear-mapped page translates identically both ways."""
        tc = profile.translation
        end = tc.page_offset + (profile.slab.pfn_end - profile.slab.pfn_start) * tc.page_size

        for v in range(tc.page_offset, end, tc.page_size):
            assert walk_page_table(clean_image, tc.ttbr_phys, v) == virt_to_phys_linear(tc, v)

    def test_walk_reaches_high_vectors(self, clean_image, profile):
        tc = profile.translation

        phys = walk_page_table(clean_image, tc.ttbr_phys, tc.evt_virt + 0x420)

        assert phys == tc.evt_phys + 0x420
