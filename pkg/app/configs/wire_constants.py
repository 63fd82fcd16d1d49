# Wire and trace constants shared by the codecs, the transport and the collectives


class WireConstants:
    FLAG_SPARSE = 0x00
    FLAG_DENSE = 0x01
    FLAG_QUANTIZED = 0x02

    # flag byte + u32 dimension
    STREAM_HEADER_BYTES = 5
    # u32 entry count following the stream header of a sparse payload
    SPARSE_COUNT_BYTES = 4
    INDEX_BYTES = 4
    # flag + u32 N + u8 bits + u32 B
    QUANTIZED_HEADER_BYTES = 10
    SCALE_BYTES = 4
    # socket framing: u32 length prefix
    FRAME_PREFIX_BYTES = 4

    MAX_DIMENSION = 2**32 - 1


class StageLabels:
    P2P = "p2p"
    SPLIT_SLICE = "split-slice"
    FOLD_PRE = "fold-pre"
    FOLD_POST = "fold-post"

    @staticmethod
    def recursive_doubling(stage: int) -> str:
        return f"rd-stage-{stage}"

    @staticmethod
    def allgather(stage: int) -> str:
        return f"ag-stage-{stage}"

    @staticmethod
    def ring_reduce_scatter(step: int) -> str:
        return f"ring-rs-{step}"

    @staticmethod
    def ring_allgather(step: int) -> str:
        return f"ring-ag-{step}"

    @staticmethod
    def is_fold(stage: str) -> bool:
        return stage in (StageLabels.FOLD_PRE, StageLabels.FOLD_POST)
