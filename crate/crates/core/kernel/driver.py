# Persistent cell interpreter for nbagent sandboxes.
#
# Frames on stdin/stdout: 4-byte big-endian length, then a UTF-8 JSON body.
#   request: {"id": <int>, "source": <str>}
#   reply:   {"id": <int>, "status": "success" | "error", "stdout": <str>, "stderr": <str>}
# File descriptor 1 is redirected to 2 at startup so stray writes from C
# extensions or subprocesses cannot corrupt the reply stream.

import ast
import contextlib
import io
import json
import os
import struct
import sys
import traceback


def read_exact(stream, n):
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def clean(text):
    # Lone surrogates cannot be encoded as UTF-8.
    return text.encode("utf-8", "replace").decode("utf-8")


def run_cell(cell_id, source, namespace):
    out, err = io.StringIO(), io.StringIO()
    status = "success"
    filename = "<cell %d>" % cell_id
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            tree = ast.parse(source, filename=filename, mode="exec")
            last = None
            if tree.body and isinstance(tree.body[-1], ast.Expr):
                last = ast.Expression(tree.body.pop().value)
            exec(compile(tree, filename, "exec"), namespace)
            if last is not None:
                value = eval(compile(last, filename, "eval"), namespace)
                if value is not None:
                    print(repr(value))
        except BaseException as exc:
            status = "error"
            tb = None if isinstance(exc, SyntaxError) else exc.__traceback__.tb_next
            traceback.print_exception(type(exc), exc, tb)
    stderr = err.getvalue()
    if status == "error" and not stderr:
        stderr = "error\n"
    return {"id": cell_id, "status": status, "stdout": clean(out.getvalue()), "stderr": clean(stderr)}


def main():
    requests = sys.stdin.buffer
    replies = os.fdopen(os.dup(1), "wb")
    os.dup2(2, 1)
    os.environ.setdefault("MPLBACKEND", "Agg")
    namespace = {"__name__": "__main__", "__builtins__": __builtins__}
    while True:
        header = read_exact(requests, 4)
        if header is None:
            return
        (length,) = struct.unpack(">I", header)
        body = read_exact(requests, length)
        if body is None:
            return
        request = json.loads(body.decode("utf-8"))
        reply = run_cell(request["id"], request["source"], namespace)
        data = json.dumps(reply, ensure_ascii=False).encode("utf-8")
        replies.write(struct.pack(">I", len(data)) + data)
        replies.flush()


main()
