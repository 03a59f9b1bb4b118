import struct

from src.exceptions import ChecksumMismatch


class DataView:
    """Little-endian reads from a byte buffer at explicit offsets."""

    def __init__(self, array):
        self.array = memoryview(array)

    def __len__(self):
        return len(self.array)

    def __unpack(self, fmt, start_index):
        size = struct.calcsize(fmt)
        if start_index < 0 or start_index + size > len(self.array):
            raise ChecksumMismatch(
                f"Truncated buffer: need {size} bytes at {start_index}, have {len(self.array)}"
            )
        return struct.unpack_from(fmt, self.array, start_index)

    def get_uint_8(self, start_index):
        return self.__unpack("<B", start_index)[0]

    def get_uint_16(self, start_index):
        return self.__unpack("<H", start_index)[0]

    def get_uint_32(self, start_index):
        return self.__unpack("<I", start_index)[0]

    def get_bytes(self, start_index, count):
        return bytes(self.__unpack(f"<{count}s", start_index)[0])

    def get_uint_32_arr(self, start_index, count):
        return list(self.__unpack(f"<{count}I", start_index))
