"""Tests for the ARM32 decoder and encoders."""

import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from joker.arm_codec import (
    NOP_WORD,
    AddPcImm,
    Branch,
    LdrLiteral,
    Nop,
    Svc,
    Unknown,
    decode,
    disassemble_line,
    encode_add_pc_imm,
    encode_branch,
    encode_ldr_pc_literal,
    encode_svc,
    is_pc_relative,
    literal_target,
)
from joker.errors import EncodingError, NotPcRelativeError

VECTOR_SWI = 0xC003D140


class TestDecode:
    """Test classification of the supported vocabulary."""

    def test_swi_vector_literal_load(self):
        i = decode(0xE59FF410, 0xFFFF0008)

        assert i.kind == LdrLiteral(rd=15, add=True, imm12=0x410)
        assert literal_target(i) == 0xFFFF0420

    def test_redirected_swi_vector_load(self):
        assert literal_target(decode(0xE59FF414, 0xFFFF0008)) == 0xFFFF0424

    def test_nop(self):
        assert decode(NOP_WORD, 0x1234).kind == Nop()

    def test_branch_target(self):
        i = decode(0xEA0000DD, 0xFFFF0004)

        assert isinstance(i.kind, Branch)
        assert literal_target(i) == 0xFFFF0380

    def test_backward_branch(self):
        word = encode_branch(0xC0001000, 0xC0000800)

        assert literal_target(decode(word, 0xC0001000)) == 0xC0000800

    def test_table_pointer_load(self):
        """BEHAVIOR: add r8, pc, #148 targets fetch + 8 + 148."""
        i = decode(0xE28F8094, VECTOR_SWI + 0x108)

        assert i.kind == AddPcImm(rd=8, imm=148)
        assert literal_target(i) == VECTOR_SWI + 0x1A4

    def test_rotated_immediate(self):
        # imm8 0x3F rotated right by 2*15 = 30 -> 0xFC
        assert decode(0xE28F0F3F, 0).kind == AddPcImm(rd=0, imm=0xFC)

    def test_svc(self):
        assert decode(0xEF9F0000, 0xFFFF0000).kind == Svc(imm24=0x9F0000)

    def test_conditional_word_is_unknown(self):
        """BEHAVIOR: Only the ALways condition is recognised."""
        assert decode(0x159F8084, 0).kind == Unknown()
        assert decode(0x00000000, 0).kind == Unknown()

    def test_unknown_has_no_target(self):
        with pytest.raises(NotPcRelativeError):
            literal_target(decode(0xE3A00000, 0))
        assert not is_pc_relative(decode(0xE3A00000, 0))

    def test_clean_vectors_decode_fully(self, clean_image, profile):
        """BEHAVIOR: The eight vector slots of a clean kernel contain no Unknown words."""
        tc = profile.translation
        words = struct.unpack("<8I", clean_image.read(tc.evt_phys, 32))

        kinds = [decode(w, tc.evt_virt + 4 * n).kind for n, w in enumerate(words)]

        assert not any(isinstance(k, Unknown) for k in kinds)


class TestEncode:
    """Test the encoders used by the forge and the samples."""

    def test_vector_literal_load(self):
        assert encode_ldr_pc_literal(15, 0x410) == 0xE59FF410

    def test_table_literal_load(self):
        word = encode_ldr_pc_literal(8, 0x80)

        assert word == 0xE59F8080
        assert disassemble_line(decode(word, 0)) == "ldr r8, [pc, #128]"

    def test_negative_literal_offset(self):
        i = decode(encode_ldr_pc_literal(1, 4, add=False), 0x100)

        assert literal_target(i) == 0x104

    def test_literal_offset_overflow(self):
        with pytest.raises(EncodingError):
            encode_ldr_pc_literal(0, 4096)

    def test_add_needs_rotation(self):
        with pytest.raises(EncodingError, match="rotation"):
            encode_add_pc_imm(8, 0x100)

    def test_branch_misaligned(self):
        with pytest.raises(EncodingError):
            encode_branch(0x1000, 0x1002)

    def test_svc_range(self):
        assert encode_svc(0x9F0000) == 0xEF9F0000
        with pytest.raises(EncodingError):
            encode_svc(1 << 24)

    @given(st.integers(0, 15), st.integers(0, 4095), st.booleans())
    def test_literal_load_round_trip(self, rd, imm12, add):
        """BEHAVIOR: decode inverts encode_ldr_pc_literal for every register."""
        assert decode(encode_ldr_pc_literal(rd, imm12, add), 0).kind == LdrLiteral(rd, add, imm12)

    @given(st.integers(0, 15), st.integers(0, 0xFF))
    def test_add_pc_round_trip(self, rd, imm):
        assert decode(encode_add_pc_imm(rd, imm), 0).kind == AddPcImm(rd, imm)

    @given(
        st.sampled_from([0xE59FF410, 0xEA0000DD, 0xE28F8094]),
        st.integers(0, 0x7FFF0000).map(lambda v: v & ~3),
        st.integers(0, 0xFFFF).map(lambda k: k * 4),
    )
    def test_target_shifts_with_fetch(self, word, fetch, shift):
        """BEHAVIOR: Moving the fetch address moves the target by the same amount."""
        base = literal_target(decode(word, fetch))

        assert literal_target(decode(word, fetch + shift)) == base + shift


class TestDisassembly:
    """Test report disassembly strings."""

    @pytest.mark.parametrize(
        "word,fetch,text",
        [
            (0xE59FF410, 0xFFFF0008, "ldr pc, [pc, #1040]"),
            (0xE28F8094, VECTOR_SWI + 0x48, "add r8, pc, #148"),
            (0xEA0000DD, 0xFFFF0004, "b 0xffff0380"),
            (0xEF9F0000, 0xFFFF0000, "svc 0x9f0000"),
            (NOP_WORD, 0, "nop"),
            (0x00000000, 0, ".word 0x00000000"),
            (0xC02864C8, VECTOR_SWI + 0xD0, ".word 0xc02864c8"),
        ],
    )
    def test_lines(self, word, fetch, text):
        assert disassemble_line(decode(word, fetch)) == text
