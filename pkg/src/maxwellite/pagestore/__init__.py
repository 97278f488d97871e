"""Page-based, in-place storage engine."""
from .format import (NIL, PAGE_SIZE, ChecksumError, CorruptionError, MemFile, PageKind,
                     StoreError)
from .store import (Direction, DuplicateTableError, InvalidKeyError, OutOfPagesError, Outcome, SchemaMismatchError,
                    Store, StoreConfig, TableInfo, Txn, TxnState, TxnStateError,
                    UncleanShutdownError, UnknownTableError, open_database)

__all__ = [
    "NIL", "PAGE_SIZE", "ChecksumError", "CorruptionError", "MemFile", "PageKind", "StoreError",
    "Direction", "DuplicateTableError", "InvalidKeyError", "OutOfPagesError", "Outcome", "SchemaMismatchError", "Store",
    "StoreConfig", "TableInfo", "Txn", "TxnState", "TxnStateError", "UncleanShutdownError",
    "UnknownTableError", "open_database",
]
