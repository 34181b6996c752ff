char *decode_record(const unsigned char *data, size_t size)
{
    size_t len
    char *out;

    len = data[0];
    out = malloc(len + 1);
    return out;
}
