"""skyrelay: metadata-only cloud storage agent with delegated file operations.

The agent keeps only file metadata locally and hands heavyweight work
(download, compress, encrypt, convert, cross-account transfer) to worker
instances coordinated by a trusted server.  A time-ratcheted key protocol
protects storage credentials handed to shared workers, and an interval
bin-packing scheduler packs operation requests onto a minimal instance pool.
"""

__version__ = "0.1.0"
