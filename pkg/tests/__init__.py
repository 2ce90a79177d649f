# Tests package for text-guided deblocking
