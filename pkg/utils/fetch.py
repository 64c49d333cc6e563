from ftl.errors import FtlError
from ftl.io_engine import IoKind


def fetch_read(handle, lsn, count=1):
    """
    Read sectors through the request queues.

    param handle: live EngineHandle.
    param lsn: first logical sector.
    param count: number of consecutive sectors.
    """
    print(f"read lsn {lsn}..{lsn + count - 1}")
    completions = [handle.submit(IoKind.READ, lsn + i) for i in range(count)]

    # a failed read shows up as None so the caller can assert on it
    body = []
    for completion in completions:
        try:
            body.append(completion.wait())
        except FtlError as error:
            print(f"read failed: {error}")
            body.append(None)

    return [completions, body]


def fetch_write(handle, lsn, sectors):
    """
    Write sectors through the request queues and wait for all of them.

    param handle: live EngineHandle.
    param lsn: first logical sector.
    param sectors: list of sector-sized payloads.
    """
    completions = [handle.submit(IoKind.WRITE, lsn + i, data) for i, data in enumerate(sectors)]
    errors = []
    for completion in completions:
        try:
            completion.wait()
        except FtlError as error:
            errors.append(error)
    return [completions, errors]


def fetch_flush(handle, lpn=None):
    completion = handle.submit(IoKind.FLUSH, lpn=lpn)
    try:
        completion.wait()
    except FtlError as error:
        print(f"flush of {lpn} failed: {error}")
        return [completion, error]
    return [completion, None]
