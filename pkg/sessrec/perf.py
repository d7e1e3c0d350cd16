import sys
import time
from collections import OrderedDict, defaultdict
from contextlib import contextmanager

from sessrec import constants

stack = list()
messages = list()
timings = OrderedDict()


def indent():
    if len(stack) < 2:
        return ''
    return ('| ' * (len(stack) - 2)) + '+'


def push(cnt=1):
    for _ in range(cnt):
        stack.append(time.time())


def pop(cnt=1):
    ret = None
    for _ in range(cnt):
        ret = stack.pop()
    return ret


def get_time(back=0):
    slen = len(stack)
    if back >= slen or back == -1:
        back = slen - 1
    return stack[slen - back - 1]


def print_all():
    global messages
    if constants.VERBOSE:
        for message in messages:
            sys.stderr.write(message + "\n")
    messages = []


def msg(label, message, back=0):
    timediff = time.time() - get_time(back)
    timings[label] = timings.get(label, 0.0) + timediff
    messages.append(indent() + message.format(time=timediff))
    print_all()


def running_time_decorator(fn):
    def wrapped(*p, **k):
        push(2)
        ret = fn(*p, **k)
        msg(fn.__name__, "Function " + fn.__name__ + " (" + fn.__module__ +
            ") took {time} seconds.", 1)
        pop(2)
        return ret
    wrapped.__name__ = fn.__name__
    wrapped.__doc__ = fn.__doc__
    return wrapped


@contextmanager
def running_time(text):
    push(2)
    yield
    msg(text, text + " took {time} seconds.", 1)
    pop(2)


class FlopCounter:
    """Counts multiply-accumulate operations of matmuls, grouped by tag.

    Only one counter is active at a time; ``numerics.matmul`` reports to it.
    """
    active = None

    def __init__(self):
        self.counts = defaultdict(int)
        self.tags = ['other']

    def add(self, macs):
        self.counts[self.tags[-1]] += int(macs)

    def total(self):
        return sum(self.counts.values())

    def __enter__(self):
        self._previous = FlopCounter.active
        FlopCounter.active = self
        return self

    def __exit__(self, *exc):
        FlopCounter.active = self._previous
        return False


def count_macs(macs):
    if FlopCounter.active is not None:
        FlopCounter.active.add(macs)


@contextmanager
def flop_tag(name):
    counter = FlopCounter.active
    if counter is None:
        yield
        return
    counter.tags.append(name)
    try:
        yield
    finally:
        counter.tags.pop()
