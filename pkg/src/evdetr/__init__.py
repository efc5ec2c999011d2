""" Streaming object detection from asynchronous DAVIS events and frames. """
