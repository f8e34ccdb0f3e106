import heapq


class OrderedBatchQueue:
    """
    Min-heap that releases worker results in sample-position order.

    Workers finish in any order; items are pushed with their position in the shuffled index list
    and only handed out once every earlier position has been handed out.

    Attributes:
        heap (list): (position, counter, item) entries.
        counter (int): tie breaker so items themselves are never compared.
        next_position (int): the position the consumer is waiting for.
    """

    def __init__(self, start_position=0):
        self.heap = []
        self.counter = 0
        self.next_position = start_position
        self.total_pushed = 0
        self.total_released = 0

    def push(self, position, item):
        """
        Args:
            position (int): index of the sample in the epoch order.
            item: the prepared sample (or a skip marker).
        """
        if position < self.next_position:
            raise ValueError(f"Position {position} was already released")
        heapq.heappush(self.heap, (position, self.counter, item))
        self.counter += 1
        self.total_pushed += 1

    def pop_ready(self):
        """
        Returns:
            list: (position, item) pairs that are next in order, possibly empty.
        """
        ready = []
        while self.heap and self.heap[0][0] == self.next_position:
            position, _, item = heapq.heappop(self.heap)
            ready.append((position, item))
            self.next_position += 1
            self.total_released += 1
        return ready

    def empty(self) -> bool:
        return len(self.heap) == 0

    def size(self) -> int:
        return len(self.heap)
